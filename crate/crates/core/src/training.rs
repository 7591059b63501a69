//! Segment packing, dynamic masking, the AdamW optimiser and the three
//! training drivers: masked-LM pre-training (fresh or continued from an
//! existing model), classifier fine-tuning with best-checkpoint selection,
//! and the learning-rate × batch-size grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Document;
use crate::error::{invalid, Error, Result};
use crate::eval::{self, MetricMode, MetricsReport};
use crate::model::{Model, ModelConfig, Objective, Parameters};
use crate::tokenizer::{is_special, Tokenizer, CLS_ID, MASK_ID, NUM_SPECIAL, SEP_ID};

pub const FULL_SCALE_SEGMENT_LENGTH: usize = 512;
/// Default learning-rate by batch-size grid searched by [`hyperparameter_grid`].
pub const GRID_LEARNING_RATES: [f64; 3] = [1e-5, 2e-5, 5e-5];
pub const GRID_BATCH_SIZES: [usize; 2] = [16, 64];

/// Mixes a base seed with a list of integers (splitmix64 finaliser per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Concatenates tokenized documents, with one `</s>` between neighbours, and
/// cuts the stream into `segment_length` pieces. The final piece may be
/// shorter.
pub fn pack_segments(documents: &[Vec<u32>], segment_length: usize) -> Result<Vec<Vec<u32>>> {
    if segment_length == 0 {
        return Err(invalid("segment length must be positive"));
    }
    let mut stream = Vec::new();
    for doc in documents.iter().filter(|d| !d.is_empty()) {
        if !stream.is_empty() {
            stream.push(SEP_ID);
        }
        stream.extend_from_slice(doc);
    }
    if stream.is_empty() {
        return Err(invalid("nothing to pack: token stream is empty"));
    }
    Ok(stream.chunks(segment_length).map(<[u32]>::to_vec).collect())
}

/// Tokenizes documents and packs them into segments.
pub fn tokenize_and_pack(
    tokenizer: &Tokenizer,
    docs: &[Document],
    segment_length: usize,
) -> Result<Vec<Vec<u32>>> {
    let tokenized: Vec<Vec<u32>> = docs.iter().map(|d| tokenizer.encode(&d.text)).collect();
    pack_segments(&tokenized, segment_length)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    pub replace_with_mask: f64,
    pub replace_with_random: f64,
    pub keep_original: f64,
    /// Draw fresh positions every step (otherwise once per segment).
    pub dynamic: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_rate: 0.15,
            replace_with_mask: 0.8,
            replace_with_random: 0.1,
            keep_original: 0.1,
            dynamic: true,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.mask_rate) {
            problems.push(format!(
                "mask_rate must be in [0, 1), got {}",
                self.mask_rate
            ));
        }
        for (name, v) in [
            ("replace_with_mask", self.replace_with_mask),
            ("replace_with_random", self.replace_with_random),
            ("keep_original", self.keep_original),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        let sum = self.replace_with_mask + self.replace_with_random + self.keep_original;
        if (sum - 1.0).abs() > 1e-9 {
            problems.push(format!("replacement ratios must sum to 1, got {sum}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSegment {
    pub input: Vec<u32>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

/// Number of positions selected out of `maskable`.
pub fn mask_count(mask_rate: f64, maskable: usize) -> usize {
    if mask_rate <= 0.0 || maskable == 0 {
        return 0;
    }
    ((mask_rate * maskable as f64).round() as usize).clamp(1, maskable)
}

/// Selects `round(mask_rate · maskable)` non-special positions (at least
/// one) and corrupts them: `<mask>`, a random non-special token, or left
/// unchanged, with the policy's probabilities.
pub fn apply_dynamic_masking(
    segment: &[u32],
    policy: &MaskingPolicy,
    vocab_size: usize,
    step_seed: u64,
) -> Result<MaskedSegment> {
    policy.validate()?;
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(invalid("vocabulary has no non-special tokens"));
    }
    let maskable: Vec<usize> = (0..segment.len())
        .filter(|&i| !is_special(segment[i]))
        .collect();
    if maskable.is_empty() {
        return Err(invalid("segment has no maskable (non-special) tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let n = mask_count(policy.mask_rate, maskable.len());
    let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, maskable.len(), n)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    positions.sort_unstable();
    let mut input = segment.to_vec();
    let mut targets = Vec::with_capacity(n);
    for &pos in &positions {
        targets.push(segment[pos]);
        let u: f64 = rng.gen();
        if u < policy.replace_with_mask {
            input[pos] = MASK_ID;
        } else if u < policy.replace_with_mask + policy.replace_with_random {
            input[pos] = rng.gen_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    Ok(MaskedSegment {
        input,
        positions,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// When positive, overrides `total_steps` with
    /// `epochs · ceil(train_size / batch_size)` during fine-tuning.
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_checkpoints: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Pre-training loss is logged every this many steps.
    pub log_interval: usize,
    /// Longest classification input, including `<s>` and `</s>`.
    pub max_seq_len: usize,
    /// Freeze the embeddings and this many of the lowest encoder layers
    /// while fine-tuning.
    pub frozen_layers: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            total_steps: 500,
            epochs: 0,
            warmup_fraction: 0.06,
            weight_decay: 0.01,
            seed: 42,
            eval_checkpoints: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-6,
            log_interval: 10,
            max_seq_len: 128,
            frozen_layers: 0,
        }
    }
}

impl TrainingConfig {
    /// Full-scale fine-tuning settings: learning rate 1e-5, batch 64, five
    /// epochs, 20 evaluations.
    pub fn full_scale_finetune() -> Self {
        TrainingConfig {
            learning_rate: 1e-5,
            batch_size: 64,
            epochs: 5,
            total_steps: 14_700,
            eval_checkpoints: 20,
            max_seq_len: FULL_SCALE_SEGMENT_LENGTH,
            ..TrainingConfig::default()
        }
    }

    /// Full-scale continued pre-training: 13K steps of batch 256.
    pub fn full_scale_pretrain() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 256,
            total_steps: 13_000,
            max_seq_len: FULL_SCALE_SEGMENT_LENGTH,
            ..TrainingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.total_steps == 0 && self.epochs == 0 {
            problems.push("total_steps or epochs must be positive".into());
        }
        if self.eval_checkpoints == 0 {
            problems.push("eval_checkpoints must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            problems.push(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            problems.push(format!(
                "adam_epsilon must be positive, got {}",
                self.adam_epsilon
            ));
        }
        if self.log_interval == 0 {
            problems.push("log_interval must be at least 1".into());
        }
        if self.max_seq_len < 3 {
            problems.push(format!(
                "max_seq_len must be at least 3, got {}",
                self.max_seq_len
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Step budget for a run over `train_size` examples.
    pub fn resolved_steps(&self, train_size: usize) -> usize {
        if self.epochs > 0 {
            let per_epoch = train_size.div_ceil(self.batch_size.min(train_size).max(1));
            self.epochs * per_epoch.max(1)
        } else {
            self.total_steps
        }
    }

    /// A copy whose `eval_checkpoints` does not exceed the number of steps a
    /// run on `train_size` examples will take.
    pub fn with_feasible_checkpoints(&self, train_size: usize) -> TrainingConfig {
        let steps = self.resolved_steps(train_size);
        let mut cfg = self.clone();
        if steps > 0 && cfg.eval_checkpoints > steps {
            log::warn!(
                "only {steps} steps on {train_size} examples; evaluating at each step instead of {} checkpoints",
                cfg.eval_checkpoints
            );
            cfg.eval_checkpoints = steps;
        }
        cfg
    }
}

/// Linear warmup over `round(warmup_fraction · total)` steps, then linear
/// decay to zero. `step` counts from 0.
pub fn learning_rate_at(step: usize, total_steps: usize, warmup_fraction: f64, peak: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        let remaining = total_steps.saturating_sub(step) as f64;
        peak * remaining / (total_steps - warmup).max(1) as f64
    }
}

/// Adam with decoupled weight decay. Bias, LayerNorm and classifier-bias
/// tensors are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    first_moment: Parameters,
    second_moment: Parameters,
    steps: u64,
}

fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with("gamma") || name.ends_with("beta"))
}

impl AdamW {
    pub fn new(params: &Parameters, config: &TrainingConfig) -> Self {
        AdamW {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            weight_decay: config.weight_decay,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut Parameters,
        grads: &Parameters,
        lr: f64,
        frozen: &dyn Fn(&str) -> bool,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first_moment.tensors_mut())
            .zip(self.second_moment.tensors_mut());
        for ((((name, p), (_, g)), (_, m)), (_, v)) in tensors {
            if frozen(&name) {
                continue;
            }
            let decay = if decays(&name) {
                lr * self.weight_decay
            } else {
                0.0
            };
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
                *pi -= decay * *pi + lr * update;
            }
        }
    }
}

fn frozen_predicate(frozen_layers: usize) -> impl Fn(&str) -> bool {
    move |name: &str| {
        if frozen_layers == 0 {
            return false;
        }
        if name.starts_with("embeddings.") {
            return true;
        }
        name.strip_prefix("layers.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
            .is_some_and(|i| i < frozen_layers)
    }
}

/// One row of a loss history. Steps count from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,train_loss,validation_loss\n");
    for r in history {
        let v = r
            .validation_loss
            .map(|v| format!("{v:.17e}"))
            .unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.step, r.train_loss, v);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Where a pre-training run starts from. Built once per run, so the size
/// gap between variants does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Init {
    Fresh {
        config: ModelConfig,
        seed: u64,
    },
    /// Continued pre-training: weights carry over, the step counter and
    /// optimiser state start from zero.
    Existing(Model),
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub model: Model,
    pub history: Vec<LossRecord>,
}

/// Visits examples in a fresh shuffled order each epoch.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Masked-LM training over packed segments. `validation` segments, when
/// given, are scored at every logging step with fixed masks.
pub fn pretrain_mlm(
    config: &TrainingConfig,
    policy: &MaskingPolicy,
    segments: &[Vec<u32>],
    validation: &[Vec<u32>],
    init: Init,
) -> Result<PretrainResult> {
    config.validate()?;
    policy.validate()?;
    if config.total_steps == 0 {
        return Err(Error::Config(vec![
            "total_steps must be positive for pre-training".into(),
        ]));
    }
    let mut model = match init {
        Init::Fresh { config: mc, seed } => Model::new(mc, seed)?,
        Init::Existing(m) => m,
    };
    if segments.is_empty() {
        return Err(invalid("no pre-training segments"));
    }
    for s in segments.iter().chain(validation) {
        if s.len() > model.config.max_positions {
            return Err(invalid(format!(
                "segment of length {} exceeds max_positions {}",
                s.len(),
                model.config.max_positions
            )));
        }
    }
    let vocab = model.config.vocab_size;
    let total = config.total_steps;
    let batch_size = config.batch_size.min(segments.len());
    let mut sampler = BatchSampler::new(segments.len(), derive_seed(config.seed, &[1]));
    let mut optimizer = AdamW::new(&model.params, config);
    let mut grads = model.params.zeros_like();
    let mut history = Vec::new();
    let mut interval_loss = 0.0;
    let mut interval_steps = 0;

    for step in 0..total {
        let batch = sampler.next_batch(batch_size);
        let masked: Vec<MaskedSegment> = batch
            .iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let seed = if policy.dynamic {
                    derive_seed(config.seed, &[2, step as u64, slot as u64])
                } else {
                    derive_seed(config.seed, &[3, idx as u64])
                };
                apply_dynamic_masking(&segments[idx], policy, vocab, seed)
            })
            .collect::<Result<_>>()?;
        let n_targets: usize = masked.iter().map(|m| m.targets.len()).sum();
        grads.for_each_mut(|_, g| g.fill(0.0));
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[4, step as u64]));
        let mut loss = 0.0;
        if n_targets > 0 {
            let weight = 1.0 / n_targets as f64;
            for m in &masked {
                let out = model.forward(&m.input, m.input.len(), Some(&mut dropout_rng))?;
                let objective = Objective::MaskedLm {
                    positions: &m.positions,
                    targets: &m.targets,
                };
                loss += model.backward(&out, &[(objective, weight)], &mut grads)?;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                loss,
            });
        }
        let lr = learning_rate_at(step, total, config.warmup_fraction, config.learning_rate);
        optimizer.step(&mut model.params, &grads, lr, &|_| false);
        interval_loss += loss;
        interval_steps += 1;

        let done = step + 1;
        if done % config.log_interval == 0 || done == total {
            let validation_loss = if validation.is_empty() {
                None
            } else {
                Some(eval::masked_lm_loss(
                    &model,
                    validation,
                    policy,
                    config.seed,
                )?)
            };
            log::info!(
                "pretrain step {done}/{total} train_loss {:.4}{}",
                interval_loss / interval_steps as f64,
                validation_loss
                    .map(|v| format!(" validation_loss {v:.4}"))
                    .unwrap_or_default()
            );
            history.push(LossRecord {
                step: done,
                train_loss: interval_loss / interval_steps as f64,
                validation_loss,
            });
            interval_loss = 0.0;
            interval_steps = 0;
        }
    }
    Ok(PretrainResult { model, history })
}

/// The classification target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// NFC-related (class 1) vs not (class 0).
    Binary,
    /// One class per primary subject category, in ascending code order.
    Multiclass { categories: Vec<i64> },
}

impl Task {
    /// The multiclass task over the primary categories present in `docs`.
    pub fn multiclass_from(docs: &[Document]) -> Result<Task> {
        let categories: BTreeSet<i64> = docs.iter().filter_map(|d| d.primary_category).collect();
        if categories.len() < 2 {
            return Err(invalid(format!(
                "multiclass task needs at least 2 categories, found {}",
                categories.len()
            )));
        }
        Ok(Task::Multiclass {
            categories: categories.into_iter().collect(),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multiclass { .. } => "multiclass",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass { categories } => categories.len(),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self {
            Task::Binary => vec!["other".into(), "nfc".into()],
            Task::Multiclass { categories } => categories.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn metric_mode(&self) -> MetricMode {
        match self {
            Task::Binary => MetricMode::Binary { positive: 1 },
            Task::Multiclass { .. } => MetricMode::Weighted,
        }
    }

    pub fn label_of(&self, doc: &Document) -> Result<usize> {
        match self {
            Task::Binary => doc
                .nfc_label
                .map(usize::from)
                .ok_or_else(|| invalid(format!("document {} has no label", doc.id))),
            Task::Multiclass { categories } => {
                let primary = doc
                    .primary_category
                    .ok_or_else(|| invalid(format!("document {} has no category", doc.id)))?;
                categories.binary_search(&primary).map_err(|_| {
                    invalid(format!(
                        "document {} has category {primary} outside the task",
                        doc.id
                    ))
                })
            }
        }
    }
}

/// A tokenized, labeled classification input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub ids: Vec<u32>,
    pub label: usize,
}

/// `<s> tokens… </s>`, truncated to `max_len` ids.
pub fn encode_for_classification(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(
        tokenizer
            .encode(text)
            .into_iter()
            .take(max_len.saturating_sub(2)),
    );
    ids.push(SEP_ID);
    ids
}

pub fn encode_examples(
    tokenizer: &Tokenizer,
    docs: &[Document],
    task: &Task,
    max_len: usize,
) -> Result<Vec<Example>> {
    docs.iter()
        .map(|d| {
            Ok(Example {
                id: d.id.clone(),
                ids: encode_for_classification(tokenizer, &d.text, max_len),
                label: task.label_of(d)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub validation_loss: f64,
    pub path: Option<PathBuf>,
    pub is_best: bool,
}

/// Index of the smallest loss; the earliest wins ties, NaN never wins.
pub fn select_best(losses: &[f64]) -> Option<usize> {
    losses
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &l)| match best {
            Some((_, b)) if b <= l => best,
            _ => Some((i, l)),
        })
        .map(|(i, _)| i)
}

/// Steps at which fine-tuning evaluates: `round(k · total / n)` for
/// `k = 1..=n`, so the last evaluation is at the final step.
pub fn evaluation_steps(total_steps: usize, eval_checkpoints: usize) -> Result<Vec<usize>> {
    if eval_checkpoints == 0 || eval_checkpoints > total_steps {
        return Err(Error::Config(vec![format!(
            "eval_checkpoints ({eval_checkpoints}) must be between 1 and the step count ({total_steps})"
        )]));
    }
    Ok((1..=eval_checkpoints)
        .map(|k| ((k * total_steps) as f64 / eval_checkpoints as f64).round() as usize)
        .collect())
}

/// Where fine-tuning writes its evaluation checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub tokenizer: &'a Tokenizer,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    /// The best checkpoint's model.
    pub model: Model,
    pub checkpoints: Vec<CheckpointMeta>,
    pub best_index: usize,
    pub history: Vec<LossRecord>,
    /// Metrics of the best model on the validation examples.
    pub validation_metrics: MetricsReport,
}

impl FinetuneResult {
    pub fn best(&self) -> &CheckpointMeta {
        &self.checkpoints[self.best_index]
    }
}

/// Fine-tunes a fresh classification head (and, unless frozen, the
/// encoder) on `train`, evaluating on `validation` at evenly spaced steps
/// and keeping the checkpoint with the lowest validation loss.
pub fn finetune_classifier(
    config: &TrainingConfig,
    init: &Model,
    task: &Task,
    train: &[Example],
    validation: &[Example],
    sink: Option<CheckpointSink<'_>>,
) -> Result<FinetuneResult> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(invalid(
            "fine-tuning needs non-empty train and validation sets",
        ));
    }
    let n_classes = task.num_classes();
    for ex in train.iter().chain(validation) {
        if ex.label >= n_classes {
            return Err(invalid(format!(
                "example {} has label {} outside {n_classes} classes",
                ex.id, ex.label
            )));
        }
    }
    let train_classes: BTreeSet<usize> = train.iter().map(|e| e.label).collect();
    for missing in validation
        .iter()
        .map(|e| e.label)
        .filter(|l| !train_classes.contains(l))
        .collect::<BTreeSet<_>>()
    {
        log::warn!("class {missing} appears in validation but not in training");
    }
    if config.frozen_layers > init.config.num_layers {
        return Err(Error::Config(vec![format!(
            "frozen_layers {} exceeds num_layers {}",
            config.frozen_layers, init.config.num_layers
        )]));
    }

    let mut model = init.clone();
    model.reset_classifier(n_classes, derive_seed(config.seed, &[5]))?;
    let batch_size = if config.batch_size > train.len() {
        log::warn!(
            "batch size {} exceeds the {} training examples; using {}",
            config.batch_size,
            train.len(),
            train.len()
        );
        train.len()
    } else {
        config.batch_size
    };
    let total = config.resolved_steps(train.len());
    let eval_at = evaluation_steps(total, config.eval_checkpoints)?;
    let frozen = frozen_predicate(config.frozen_layers);
    let mut sampler = BatchSampler::new(train.len(), derive_seed(config.seed, &[6]));
    let mut optimizer = AdamW::new(&model.params, config);
    let mut grads = model.params.zeros_like();
    let mut checkpoints: Vec<CheckpointMeta> = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, Model)> = None;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0;
    let mut next_eval = 0;

    for step in 0..total {
        let batch = sampler.next_batch(batch_size);
        grads.for_each_mut(|_, g| g.fill(0.0));
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[7, step as u64]));
        let weight = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in &batch {
            let ex = &train[i];
            let out = model.forward(&ex.ids, ex.ids.len(), Some(&mut dropout_rng))?;
            loss += model.backward(
                &out,
                &[(Objective::Classification { label: ex.label }, weight)],
                &mut grads,
            )?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                loss,
            });
        }
        let lr = learning_rate_at(step, total, config.warmup_fraction, config.learning_rate);
        optimizer.step(&mut model.params, &grads, lr, &frozen);
        interval_loss += loss;
        interval_steps += 1;

        let done = step + 1;
        if eval_at[next_eval] == done {
            let validation_loss = eval::classification_loss(&model, validation)?;
            if !validation_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: done,
                    loss: validation_loss,
                });
            }
            let path = match sink {
                Some(s) => {
                    let p = s.dir.join(format!("step-{done:06}.ckpt"));
                    Checkpoint::new(model.clone(), s.tokenizer).save(&p)?;
                    Some(p)
                }
                None => None,
            };
            log::info!("finetune step {done}/{total} validation_loss {validation_loss:.5}");
            if best
                .as_ref()
                .is_none_or(|(b, _)| validation_loss < checkpoints[*b].validation_loss)
            {
                best = Some((checkpoints.len(), model.clone()));
            }
            checkpoints.push(CheckpointMeta {
                step: done,
                validation_loss,
                path,
                is_best: false,
            });
            history.push(LossRecord {
                step: done,
                train_loss: interval_loss / interval_steps as f64,
                validation_loss: Some(validation_loss),
            });
            interval_loss = 0.0;
            interval_steps = 0;
            next_eval += 1;
        }
    }

    let (best_index, best_model) = best.expect("at least one evaluation");
    checkpoints[best_index].is_best = true;
    let validation_metrics = eval::evaluate_examples(&best_model, validation, task)?;
    Ok(FinetuneResult {
        model: best_model,
        checkpoints,
        best_index,
        history,
        validation_metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub loss: f64,
    pub status: String,
}

impl GridRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Runs fine-tuning once per (learning rate, batch size) cell. A failing
/// cell is recorded with its error and the grid carries on.
pub fn hyperparameter_grid(
    base: &TrainingConfig,
    learning_rates: &[f64],
    batch_sizes: &[usize],
    init: &Model,
    task: &Task,
    train: &[Example],
    validation: &[Example],
) -> Result<Vec<GridRow>> {
    if learning_rates.is_empty() || batch_sizes.is_empty() {
        return Err(invalid("hyperparameter grid is empty"));
    }
    let mut rows = Vec::new();
    for &learning_rate in learning_rates {
        for &batch_size in batch_sizes {
            let config = TrainingConfig {
                learning_rate,
                batch_size,
                ..base.clone()
            }
            .with_feasible_checkpoints(train.len());
            let row = match finetune_classifier(&config, init, task, train, validation, None) {
                Ok(r) => GridRow {
                    learning_rate,
                    batch_size,
                    accuracy: r.validation_metrics.accuracy,
                    f1: r.validation_metrics.f1,
                    loss: r.best().validation_loss,
                    status: "ok".into(),
                },
                Err(e) => {
                    log::warn!("grid cell lr={learning_rate} batch={batch_size} failed: {e}");
                    GridRow {
                        learning_rate,
                        batch_size,
                        accuracy: f64::NAN,
                        f1: f64::NAN,
                        loss: f64::NAN,
                        status: format!("failed: {e}"),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// The successful cell with the lowest validation loss.
pub fn best_grid_row(rows: &[GridRow]) -> Option<&GridRow> {
    let losses: Vec<f64> = rows
        .iter()
        .map(|r| if r.is_ok() { r.loss } else { f64::NAN })
        .collect();
    select_best(&losses).map(|i| &rows[i])
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut out = String::from("learning_rate,batch_size,accuracy,f1,loss,status\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:e},{},{},{},{},{}",
            r.learning_rate,
            r.batch_size,
            r.accuracy,
            r.f1,
            r.loss,
            r.status.replace([',', '\n'], " ")
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD_ID;

    #[test]
    fn packing_crosses_document_boundaries() {
        let docs = vec![vec![10u32; 300], vec![11u32; 300]];
        let segs = pack_segments(&docs, 512).unwrap();
        assert_eq!(segs.iter().map(Vec::len).collect::<Vec<_>>(), vec![512, 89]);
        assert_eq!(segs[0][300], SEP_ID);
        assert_eq!(pack_segments(&[vec![7u32; 512]], 512).unwrap().len(), 1);
        assert_eq!(pack_segments(&[vec![7u32]], 512).unwrap(), vec![vec![7u32]]);
        assert!(pack_segments(&[vec![]], 512).is_err());
        assert!(pack_segments(&[], 512).is_err());
    }

    #[test]
    fn mask_count_rounds_with_minimum_one() {
        assert_eq!(mask_count(0.15, 512), 77);
        assert_eq!(mask_count(0.15, 3), 1);
        assert_eq!(mask_count(0.0, 512), 0);
    }

    #[test]
    fn masking_selects_77_of_512_and_skips_specials() {
        let mut seg: Vec<u32> = (0..512).map(|i| 10 + (i % 50) as u32).collect();
        seg[0] = CLS_ID;
        seg[100] = SEP_ID;
        seg[511] = PAD_ID;
        let m = apply_dynamic_masking(&seg, &MaskingPolicy::default(), 300, 9).unwrap();
        assert_eq!(m.positions.len(), mask_count(0.15, 509));
        assert!(!m.positions.iter().any(|&p| p == 0 || p == 100 || p == 511));
        for (p, t) in m.positions.iter().zip(&m.targets) {
            assert_eq!(seg[*p], *t);
        }
        for i in 0..512 {
            if !m.positions.contains(&i) {
                assert_eq!(m.input[i], seg[i]);
            }
        }
        let full: Vec<u32> = (0..512).map(|i| 10 + (i % 50) as u32).collect();
        let m = apply_dynamic_masking(&full, &MaskingPolicy::default(), 300, 9).unwrap();
        assert_eq!(m.positions.len(), 77);
    }

    #[test]
    fn masking_edge_cases() {
        let policy = MaskingPolicy {
            mask_rate: 0.0,
            ..MaskingPolicy::default()
        };
        let m = apply_dynamic_masking(&[10, 11], &policy, 300, 1).unwrap();
        assert!(m.positions.is_empty() && m.targets.is_empty());
        assert!(
            apply_dynamic_masking(&[CLS_ID, SEP_ID], &MaskingPolicy::default(), 300, 1).is_err()
        );
        let bad = MaskingPolicy {
            replace_with_mask: 0.7,
            ..MaskingPolicy::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn masks_differ_between_steps() {
        let seg: Vec<u32> = (0..512).map(|i| 10 + (i % 50) as u32).collect();
        let p = MaskingPolicy::default();
        let mut same = 0;
        for step in 0..200u64 {
            let a = apply_dynamic_masking(&seg, &p, 300, derive_seed(1, &[2, step, 0])).unwrap();
            let b =
                apply_dynamic_masking(&seg, &p, 300, derive_seed(1, &[2, step + 1, 0])).unwrap();
            same += usize::from(a.positions == b.positions);
        }
        assert_eq!(same, 0);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..100)
            .map(|s| learning_rate_at(s, 100, 0.1, 1.0))
            .collect();
        assert!((lrs[0] - 0.1).abs() < 1e-12);
        assert!((lrs[9] - 1.0).abs() < 1e-12);
        assert!((lrs[10] - 1.0).abs() < 1e-12);
        assert!(lrs[10..].windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[99] > 0.0);
        assert!((learning_rate_at(0, 10, 0.0, 2.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_only_decays() {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 4,
            ff_dim: 4,
            max_positions: 4,
            vocab_size: 10,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 1).unwrap();
        let tc = TrainingConfig::default();
        let mut params = model.params.clone();
        let mut opt = AdamW::new(&params, &tc);
        let zero = params.zeros_like();
        opt.step(&mut params, &zero, 0.5, &|_| false);
        let lr_wd = 0.5 * tc.weight_decay;
        for ((name, after), (_, before)) in params.tensors().into_iter().zip(model.params.tensors())
        {
            for (a, b) in after.data().iter().zip(before.data()) {
                let expected = if decays(&name) { b - lr_wd * b } else { *b };
                assert_eq!(*a, expected, "{name}");
            }
        }
    }

    #[test]
    fn frozen_layers_predicate() {
        let f = frozen_predicate(1);
        assert!(f("embeddings.token"));
        assert!(f("layers.0.query_weight"));
        assert!(!f("layers.1.query_weight"));
        assert!(!f("classifier.weight"));
        assert!(!frozen_predicate(0)("embeddings.token"));
    }

    #[test]
    fn best_is_argmin() {
        assert_eq!(select_best(&[0.5, 0.3, 0.4]), Some(1));
        assert_eq!(select_best(&[0.2, 0.2]), Some(0));
        assert_eq!(select_best(&[f64::NAN, 0.9]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn evaluation_cadence() {
        assert_eq!(evaluation_steps(14_700, 20).unwrap()[0], 735);
        assert_eq!(
            *evaluation_steps(14_700, 20).unwrap().last().unwrap(),
            14_700
        );
        assert_eq!(evaluation_steps(7, 1).unwrap(), vec![7]);
        assert!(evaluation_steps(3, 4).is_err());
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            batch_size: 0,
            eval_checkpoints: 0,
            ..TrainingConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => {
                assert_eq!(p.len(), 3);
                assert!(p[0].contains("learning_rate"));
            }
            other => panic!("{other:?}"),
        }
        assert!(TrainingConfig::full_scale_finetune().validate().is_ok());
        assert_eq!(
            TrainingConfig::full_scale_finetune().resolved_steps(188_160),
            14_700
        );
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    }
}
