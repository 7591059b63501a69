//! Evaluation: MLM cross-entropy, classification metrics and the
//! training-set-size scaling study.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{nested_subsets, Document};
use crate::error::{invalid, Error, Result};
use crate::model::{softmax_cross_entropy, Model};
use crate::tensor::softmax;
use crate::tokenizer::{is_special, Tokenizer};
use crate::training::{
    apply_dynamic_masking, derive_seed, encode_examples, finetune_classifier, Example,
    MaskingPolicy, Task, TrainingConfig,
};

/// Mean of `-ln softmax(logits_i)[target_i]`. An empty target set scores 0.
pub fn mlm_cross_entropy(logits: &[Vec<f64>], targets: &[u32]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(invalid(format!(
            "{} logit vectors for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        log::warn!("cross-entropy over an empty target set is defined as 0");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::UnknownTokenId(t as u32));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += log_z - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// MLM loss over whole segments with masks that depend only on `seed` and
/// the segment index, so repeated calls see identical corruption. The mean
/// is taken over all masked positions.
pub fn masked_lm_loss(
    model: &Model,
    segments: &[Vec<u32>],
    policy: &MaskingPolicy,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        if seg.iter().all(|&t| is_special(t)) {
            continue;
        }
        let m = apply_dynamic_masking(
            seg,
            policy,
            model.config.vocab_size,
            derive_seed(seed, &[8, i as u64]),
        )?;
        if m.targets.is_empty() {
            continue;
        }
        let out = model.forward_encoder(&m.input)?;
        let logits = model.mlm_logits(&out, &m.positions)?;
        total += mlm_cross_entropy(&logits, &m.targets)? * m.targets.len() as f64;
        count += m.targets.len();
    }
    if count == 0 {
        log::warn!("no masked positions in evaluation segments; loss defined as 0");
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
    pub class_labels: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let n = class_labels.len();
        if predictions.len() != labels.len() || predictions.is_empty() {
            return Err(invalid(format!(
                "need equal, non-zero numbers of predictions ({}) and labels ({})",
                predictions.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0u64; n]; n];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= n || l >= n {
                return Err(invalid(format!("class index outside 0..{n}")));
            }
            counts[l][p] += 1;
        }
        Ok(ConfusionMatrix {
            counts,
            class_labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Examples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Examples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricMode {
    /// Per-class metrics averaged with weights `support / total`.
    Weighted,
    /// Metrics of the positive class only.
    Binary { positive: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
    /// Set when precision or recall had a zero denominator and was defined
    /// as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: MetricMode,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Mean cross-entropy, when the report came from model outputs.
    pub loss: Option<f64>,
    pub n_examples: usize,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn metrics_from_confusion(
    confusion: ConfusionMatrix,
    mode: MetricMode,
) -> Result<MetricsReport> {
    let n = confusion.num_classes();
    let total = confusion.total();
    if total == 0 {
        return Err(invalid("no examples to score"));
    }
    if let MetricMode::Binary { positive } = mode {
        if positive >= n {
            return Err(invalid(format!("positive class {positive} outside 0..{n}")));
        }
    }
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = confusion.true_positives(c);
            let support = confusion.support(c);
            let predicted = confusion.predicted(c);
            let (precision, zp) = ratio(tp, predicted);
            let (recall, zr) = ratio(tp, support);
            ClassMetrics {
                label: confusion.class_labels[c].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
                predicted,
                zero_division: zp || zr,
            }
        })
        .collect();
    let correct: u64 = (0..n).map(|c| confusion.true_positives(c)).sum();
    let accuracy = correct as f64 / total as f64;
    let (precision, recall, f1) = match mode {
        MetricMode::Binary { positive } => {
            let m = &per_class[positive];
            (m.precision, m.recall, m.f1)
        }
        MetricMode::Weighted => {
            let mut p = 0.0;
            let mut f = 0.0;
            for m in per_class.iter().filter(|m| m.support > 0) {
                let w = m.support as f64 / total as f64;
                p += w * m.precision;
                f += w * m.f1;
            }
            // Σ (s_c / N)(tp_c / s_c) collapses to Σ tp_c / N.
            (p, accuracy, f)
        }
    };
    Ok(MetricsReport {
        mode,
        accuracy,
        precision,
        recall,
        f1,
        per_class,
        loss: None,
        n_examples: total as usize,
        confusion,
    })
}

pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    class_labels: Vec<String>,
    mode: MetricMode,
) -> Result<MetricsReport> {
    metrics_from_confusion(
        ConfusionMatrix::from_predictions(predictions, labels, class_labels)?,
        mode,
    )
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    pub fn to_table(&self) -> String {
        let mode = match self.mode {
            MetricMode::Weighted => "weighted".to_string(),
            MetricMode::Binary { positive } => {
                format!("binary (positive = {})", self.per_class[positive].label)
            }
        };
        let mut s = String::new();
        let _ = writeln!(s, "mode       {mode}");
        let _ = writeln!(s, "examples   {}", self.n_examples);
        let _ = writeln!(s, "accuracy   {:.4}", self.accuracy);
        let _ = writeln!(s, "precision  {:.4}", self.precision);
        let _ = writeln!(s, "recall     {:.4}", self.recall);
        let _ = writeln!(s, "f1         {:.4}", self.f1);
        if let Some(l) = self.loss {
            let _ = writeln!(s, "loss       {l:.4}");
        }
        let _ = writeln!(
            s,
            "\n{:<12} {:>9} {:>9} {:>9} {:>8}",
            "class", "precision", "recall", "f1", "support"
        );
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}{}",
                m.label,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                if m.zero_division {
                    "  (zero division)"
                } else {
                    ""
                }
            );
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Class probabilities for one example (dropout off).
pub fn predict_probabilities(model: &Model, example: &Example) -> Result<Vec<f64>> {
    let out = model.forward_encoder(&example.ids)?;
    Ok(softmax(&model.cls_logits(&out)?))
}

/// Mean classification cross-entropy.
pub fn classification_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(invalid("no examples to score"));
    }
    let mut total = 0.0;
    for ex in examples {
        let out = model.forward_encoder(&ex.ids)?;
        let logits = model.cls_logits(&out)?;
        if ex.label >= logits.len() {
            return Err(invalid(format!(
                "label {} outside {} classes",
                ex.label,
                logits.len()
            )));
        }
        total += softmax_cross_entropy(&logits, ex.label).0;
    }
    Ok(total / examples.len() as f64)
}

/// Scores `examples` in chunks of `batch_size`. Every example is processed
/// independently and losses are summed in example order, so the chunking
/// does not affect the result.
pub fn evaluate_examples_batched(
    model: &Model,
    examples: &[Example],
    task: &Task,
    batch_size: usize,
) -> Result<MetricsReport> {
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if examples.is_empty() {
        return Err(invalid("no examples to evaluate"));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    for batch in examples.chunks(batch_size) {
        for ex in batch {
            let out = model.forward_encoder(&ex.ids)?;
            let logits = model.cls_logits(&out)?;
            if ex.label >= logits.len() {
                return Err(invalid(format!(
                    "label {} outside {} classes",
                    ex.label,
                    logits.len()
                )));
            }
            loss_sum += softmax_cross_entropy(&logits, ex.label).0;
            let best = logits
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
            predictions.push(best);
        }
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let mut report = classification_metrics(
        &predictions,
        &labels,
        task.class_names(),
        task.metric_mode(),
    )?;
    report.loss = Some(loss_sum / examples.len() as f64);
    Ok(report)
}

pub fn evaluate_examples(
    model: &Model,
    examples: &[Example],
    task: &Task,
) -> Result<MetricsReport> {
    evaluate_examples_batched(model, examples, task, examples.len().max(1))
}

/// Scores a checkpoint on a document split. The tokenizer used to encode
/// the documents must be the one the checkpoint was trained with.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    documents: &[Document],
    task: &Task,
    max_seq_len: usize,
    batch_size: usize,
) -> Result<MetricsReport> {
    checkpoint.check_tokenizer(tokenizer)?;
    if checkpoint.model.config.num_classes != task.num_classes() {
        return Err(Error::Shape(format!(
            "checkpoint has {} classes, task {} has {}",
            checkpoint.model.config.num_classes,
            task.name(),
            task.num_classes()
        )));
    }
    let examples = encode_examples(tokenizer, documents, task, max_seq_len)?;
    evaluate_examples_batched(&checkpoint.model, &examples, task, batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub init_name: String,
    pub fraction: f64,
    pub train_size: usize,
    /// Mean natural-log cross-entropy on the hold-out split.
    pub log_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingStudyResult {
    pub rows: Vec<ScalingRow>,
    /// Document ids of each nested training subset, smallest first.
    pub subsets: Vec<Vec<String>>,
}

/// The documents a scaling study needs.
#[derive(Debug, Clone, Copy)]
pub struct ScalingData<'a> {
    pub tokenizer: &'a Tokenizer,
    pub task: &'a Task,
    pub train: &'a [Document],
    pub validation: &'a [Document],
    pub holdout: &'a [Document],
}

/// Fine-tunes every init on nested fractions of the training documents with
/// the same protocol and records the hold-out log-loss of each best
/// checkpoint. Inputs are truncated to the smallest `max_positions` among
/// the inits.
pub fn scaling_study(
    config: &TrainingConfig,
    fractions: &[f64],
    inits: &[(String, Model)],
    data: ScalingData<'_>,
    seed: u64,
) -> Result<ScalingStudyResult> {
    config.validate()?;
    if inits.is_empty() {
        return Err(invalid("scaling study needs at least one init"));
    }
    let subsets = nested_subsets(data.train, fractions, seed)?;
    let max_len = inits
        .iter()
        .map(|(_, m)| m.config.max_positions)
        .fold(config.max_seq_len, usize::min);
    let validation = encode_examples(data.tokenizer, data.validation, data.task, max_len)?;
    let holdout = encode_examples(data.tokenizer, data.holdout, data.task, max_len)?;
    let mut rows = Vec::new();
    for (name, model) in inits {
        for (subset, &fraction) in subsets.iter().zip(fractions) {
            let train = encode_examples(data.tokenizer, subset, data.task, max_len)?;
            let cell = config.with_feasible_checkpoints(train.len());
            let result = finetune_classifier(&cell, model, data.task, &train, &validation, None)?;
            let log_loss = classification_loss(&result.model, &holdout)?;
            log::info!(
                "scaling {name} fraction {fraction} n={} log_loss {log_loss:.5}",
                train.len()
            );
            rows.push(ScalingRow {
                init_name: name.clone(),
                fraction,
                train_size: train.len(),
                log_loss,
            });
        }
    }
    Ok(ScalingStudyResult {
        rows,
        subsets: subsets
            .iter()
            .map(|s| s.iter().map(|d| d.id.clone()).collect())
            .collect(),
    })
}

pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    let mut out = String::from("init_name,fraction,train_size,log_loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.init_name, r.fraction, r.train_size, r.log_loss
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = vec![vec![0.0; 4096]];
        assert!((mlm_cross_entropy(&uniform, &[17]).unwrap() - 4096f64.ln()).abs() < 1e-12);
        let ce = mlm_cross_entropy(&[vec![1.0, 0.0, 0.0]], &[0]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((ce - expected).abs() < 1e-15);
        assert!((ce - 0.5514).abs() < 1e-4);
        assert_eq!(mlm_cross_entropy(&[], &[]).unwrap(), 0.0);
        assert!(mlm_cross_entropy(&[vec![0.0]], &[]).is_err());
    }

    #[test]
    fn near_certain_prediction() {
        // p(target) = 1 - 1e-9 over two classes
        let gap = ((1.0 - 1e-9) / 1e-9f64).ln();
        let ce = mlm_cross_entropy(&[vec![gap, 0.0]], &[0]).unwrap();
        assert!((ce - 1e-9).abs() < 1e-15);
        let ce = mlm_cross_entropy(&[vec![1e6, -1e6]], &[1]).unwrap();
        assert!(ce.is_finite());
    }

    #[test]
    fn binary_hand_example() {
        // TP=3, FP=1, FN=2, TN=4 with class 1 positive
        let mut preds = vec![1, 1, 1, 1, 0, 0];
        let mut labels = vec![1, 1, 1, 0, 1, 1];
        preds.extend([0; 4]);
        labels.extend([0; 4]);
        let r = classification_metrics(
            &preds,
            &labels,
            names(2),
            MetricMode::Binary { positive: 1 },
        )
        .unwrap();
        assert!((r.precision - 0.75).abs() < 1e-15);
        assert!((r.recall - 0.6).abs() < 1e-15);
        assert!((r.f1 - 2.0 * 0.45 / 1.35).abs() < 1e-15);
        assert!((r.accuracy - 0.7).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let y = vec![0, 1, 2, 2, 1];
        let r = classification_metrics(&y, &y, names(3), MetricMode::Weighted).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn zero_division_is_flagged() {
        let r = classification_metrics(&[0, 0], &[0, 1], names(3), MetricMode::Weighted).unwrap();
        assert!(r.per_class[1].zero_division);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r.per_class[2].zero_division);
        assert_eq!(r.per_class[2].support, 0);
        assert!(classification_metrics(&[], &[], names(2), MetricMode::Weighted).is_err());
        assert!(classification_metrics(&[3], &[0], names(2), MetricMode::Weighted).is_err());
    }

    #[test]
    fn all_positive_dataset_binary_equals_weighted_restricted() {
        let preds = vec![1, 0, 1, 1];
        let labels = vec![1, 1, 1, 1];
        let b = classification_metrics(
            &preds,
            &labels,
            names(2),
            MetricMode::Binary { positive: 1 },
        )
        .unwrap();
        let w = classification_metrics(&preds, &labels, names(2), MetricMode::Weighted).unwrap();
        assert_eq!(b.precision, w.precision);
        assert_eq!(b.recall, w.recall);
        assert_eq!(b.f1, w.f1);
    }

    #[test]
    fn report_renders() {
        let r = classification_metrics(
            &[0, 1],
            &[0, 0],
            names(2),
            MetricMode::Binary { positive: 1 },
        )
        .unwrap();
        let table = r.to_table();
        assert!(table.contains("binary (positive = 1)"));
        assert!(table.contains("zero division"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn weighted_recall_is_accuracy(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = classification_metrics(&p, &l, names(5), MetricMode::Weighted).unwrap();
            prop_assert_eq!(r.recall, r.accuracy);
            for v in [r.accuracy, r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn metrics_ignore_example_order(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..100), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p1, l1): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let (p2, l2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
            let a = classification_metrics(&p1, &l1, names(3), MetricMode::Weighted).unwrap();
            let b = classification_metrics(&p2, &l2, names(3), MetricMode::Weighted).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
