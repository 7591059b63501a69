//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stdout (bypassing the harness capture) before asserting.
//! Expected values are computed here independently of the library.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dapt::analysis::{cbtfidf_scores, cbtfidf_topics, ClusterAssignment};
use dapt::corpus::{map_binary_label, write_corpus, Document, LabelScheme};
use dapt::error::Error;
use dapt::eval::{
    classification_loss, classification_metrics, masked_lm_loss, scaling_study, MetricMode,
    ScalingData,
};
use dapt::model::{finite_difference_check, Model, ModelConfig, Objective};
use dapt::synthetic::{domain_texts, general_texts, separable_documents};
use dapt::tokenizer::{is_special, Tokenizer, MASK_ID};
use dapt::training::{
    apply_dynamic_masking, best_grid_row, encode_examples, finetune_classifier,
    hyperparameter_grid, pack_segments, pretrain_mlm, Init, MaskingPolicy, PretrainResult, Task,
    TrainingConfig, GRID_BATCH_SIZES, GRID_LEARNING_RATES,
};

fn report(
    criterion: u32,
    summary: &str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
) {
    let within = elapsed <= budget;
    let verdict = if passed && within { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{verdict} criterion {criterion}: {summary} ({detail}; {:.1}s of {}s budget)",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let _ = out.flush();
    assert!(passed, "criterion {criterion} failed: {detail}");
    assert!(
        within,
        "criterion {criterion} exceeded its runtime budget: {elapsed:?} > {budget:?}"
    );
}

/// Tokenizer and general-register base model shared by the training criteria.
struct Fixture {
    tokenizer: Tokenizer,
    base: PretrainResult,
    domain_segments: Vec<Vec<u32>>,
    heldout_segments: Vec<Vec<u32>>,
    setup_time: Duration,
}

fn small_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 32,
        ff_dim: 64,
        max_positions: 64,
        vocab_size,
        num_classes: 2,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    }
}

fn pretrain_config() -> TrainingConfig {
    TrainingConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        total_steps: 300,
        log_interval: 50,
        ..TrainingConfig::default()
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let start = Instant::now();
        let general = general_texts(400, 1);
        let domain = domain_texts(400, 2);
        let heldout = domain_texts(60, 3);
        let science: Vec<String> = separable_documents(200, 4, "tok")
            .unwrap()
            .into_iter()
            .map(|d| d.text)
            .collect();
        let mut tokenizer_corpus = general.clone();
        tokenizer_corpus.extend(domain.iter().cloned());
        tokenizer_corpus.extend(science);
        let tokenizer = Tokenizer::train(&tokenizer_corpus, 512).unwrap();
        let pack = |texts: &[String]| {
            let ids: Vec<Vec<u32>> = texts.iter().map(|t| tokenizer.encode(t)).collect();
            pack_segments(&ids, 64).unwrap()
        };
        let general_segments = pack(&general);
        let domain_segments = pack(&domain);
        let heldout_segments = pack(&heldout);
        let base = pretrain_mlm(
            &pretrain_config(),
            &MaskingPolicy::default(),
            &general_segments,
            &[],
            Init::Fresh {
                config: small_model(tokenizer.vocab_size()),
                seed: 1,
            },
        )
        .unwrap();
        Fixture {
            tokenizer,
            base,
            domain_segments,
            heldout_segments,
            setup_time: start.elapsed(),
        }
    })
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let model = Model::new(
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 16,
            ff_dim: 32,
            max_positions: 16,
            vocab_size: 64,
            num_classes: 3,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        },
        11,
    )
    .unwrap();
    let ids = [0u32, 9, 17, 4, 33, 52, 8, 2, 1, 1];
    let positions = [2usize, 4, 6];
    let targets = [21u32, 40, 63];
    let terms = [
        (
            Objective::MaskedLm {
                positions: &positions,
                targets: &targets,
            },
            1.0,
        ),
        (Objective::Classification { label: 2 }, 0.5),
    ];
    // The last two positions are padding, which exercises the attention mask.
    let checks = finite_difference_check(&model, &ids, 8, &terms, 1e-4).unwrap();
    let groups = checks.len();
    let mut worst = (String::new(), 0.0f64);
    for c in checks {
        if c.max_relative_error.is_nan() || c.max_relative_error > worst.1 {
            worst = (c.name.clone(), c.max_relative_error);
        }
    }
    let passed = worst.1 < 1e-4;
    report(
        1,
        "analytic gradients match central differences",
        passed,
        format!(
            "{groups} parameter tensors, worst relative error {:.2e} in {}",
            worst.1, worst.0
        ),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_02_masking_statistics() {
    let start = Instant::now();
    let tokenizer = Tokenizer::train(&general_texts(100, 5), 300).unwrap();
    let ids: Vec<Vec<u32>> = general_texts(3000, 6)
        .iter()
        .map(|t| tokenizer.encode(t))
        .collect();
    let stream = pack_segments(&ids, 512).unwrap();
    let full: Vec<&Vec<u32>> = stream.iter().filter(|s| s.len() == 512).collect();
    let policy = MaskingPolicy::default();
    let (mut maskable, mut selected, mut masked, mut random, mut kept, mut special_hits) =
        (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    for n in 0..10_000u64 {
        let segment = full[(n as usize) % full.len()];
        let m = apply_dynamic_masking(segment, &policy, tokenizer.vocab_size(), 1_000 + n).unwrap();
        maskable += segment.iter().filter(|&&t| !is_special(t)).count() as u64;
        selected += m.positions.len() as u64;
        for (&p, &target) in m.positions.iter().zip(&m.targets) {
            if is_special(segment[p]) {
                special_hits += 1;
            }
            assert_eq!(segment[p], target);
            match m.input[p] {
                MASK_ID => masked += 1,
                t if t == target => kept += 1,
                _ => random += 1,
            }
        }
    }
    let rate = selected as f64 / maskable as f64;
    let split = [masked, random, kept].map(|c| c as f64 / selected as f64);
    let passed = (rate - 0.15).abs() <= 0.005
        && (split[0] - 0.8).abs() <= 0.01
        && (split[1] - 0.1).abs() <= 0.01
        && (split[2] - 0.1).abs() <= 0.01
        && special_hits == 0;
    report(
        2,
        "dynamic masking rate and replacement split",
        passed,
        format!(
            "selected {:.4}, mask/random/keep {:.4}/{:.4}/{:.4}, {special_hits} special positions",
            rate, split[0], split[1], split[2]
        ),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn criterion_03_domain_adaptive_pretraining_lowers_domain_loss() {
    let start = Instant::now();
    let f = fixture();
    let policy = MaskingPolicy::default();
    let before = masked_lm_loss(&f.base.model, &f.heldout_segments, &policy, 99).unwrap();
    let adapted = pretrain_mlm(
        &pretrain_config(),
        &policy,
        &f.domain_segments,
        &[],
        Init::Existing(f.base.model.clone()),
    )
    .unwrap();
    let after = masked_lm_loss(&adapted.model, &f.heldout_segments, &policy, 99).unwrap();
    let relative = (before - after) / before;
    report(
        3,
        "continued pre-training lowers held-out domain MLM loss",
        after < before && relative >= 0.10,
        format!("{before:.4} -> {after:.4}, {:.1}% lower", 100.0 * relative),
        start.elapsed() + f.setup_time,
        Duration::from_secs(600),
    );
}

/// Metrics computed straight from the prediction and label lists.
fn oracle_metrics(
    pred: &[usize],
    label: &[usize],
    k: usize,
    positive: Option<usize>,
) -> (f64, f64, f64, f64) {
    let n = pred.len() as f64;
    let accuracy = pred.iter().zip(label).filter(|(p, l)| p == l).count() as f64 / n;
    let class = |c: usize| {
        let tp = pred
            .iter()
            .zip(label)
            .filter(|&(&p, &l)| p == c && l == c)
            .count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = label.iter().filter(|&&l| l == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        (p, r, f, actual)
    };
    match positive {
        Some(c) => {
            let (p, r, f, _) = class(c);
            (accuracy, p, r, f)
        }
        None => {
            let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
            for c in 0..k {
                let (p, r, f, support) = class(c);
                wp += support / n * p;
                wr += support / n * r;
                wf += support / n * f;
            }
            (accuracy, wp, wr, wf)
        }
    }
}

#[test]
fn criterion_04_metrics_match_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut recall_is_accuracy = true;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=8);
        let n = rng.gen_range(1..200);
        let label: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let names: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
        let weighted =
            classification_metrics(&pred, &label, names.clone(), MetricMode::Weighted).unwrap();
        let (a, p, r, f) = oracle_metrics(&pred, &label, k, None);
        for (got, want) in [
            (weighted.accuracy, a),
            (weighted.precision, p),
            (weighted.recall, r),
            (weighted.f1, f),
        ] {
            worst = worst.max((got - want).abs());
        }
        recall_is_accuracy &= weighted.recall == weighted.accuracy;
        let positive = rng.gen_range(0..k);
        let binary =
            classification_metrics(&pred, &label, names, MetricMode::Binary { positive }).unwrap();
        let (a, p, r, f) = oracle_metrics(&pred, &label, k, Some(positive));
        for (got, want) in [
            (binary.accuracy, a),
            (binary.precision, p),
            (binary.recall, r),
            (binary.f1, f),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    report(
        4,
        "weighted and binary metrics match a brute-force oracle",
        worst <= 1e-9 && recall_is_accuracy,
        format!("max deviation {worst:.2e}, weighted recall == accuracy: {recall_is_accuracy}"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_05_finetuning_keeps_the_best_checkpoint() {
    let start = Instant::now();
    let f = fixture();
    let task = Task::Binary;
    let docs = separable_documents(300, 5, "ft").unwrap();
    let examples = encode_examples(&f.tokenizer, &docs, &task, 64).unwrap();
    let (train, rest) = examples.split_at(200);
    let (validation, holdout) = rest.split_at(40);
    let config = TrainingConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 5,
        eval_checkpoints: 20,
        ..TrainingConfig::default()
    };
    let result =
        finetune_classifier(&config, &f.base.model, &task, train, validation, None).unwrap();
    let losses: Vec<f64> = result
        .checkpoints
        .iter()
        .map(|c| c.validation_loss)
        .collect();
    let mut argmin = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[argmin] {
            argmin = i;
        }
    }
    let recomputed = classification_loss(&result.model, validation).unwrap();
    let holdout_metrics = dapt::eval::evaluate_examples(&result.model, holdout, &task).unwrap();
    let passed = losses.len() == 20
        && result.best_index == argmin
        && recomputed == losses[argmin]
        && result.validation_metrics.accuracy > 0.95
        && holdout_metrics.accuracy > 0.95;
    report(
        5,
        "fine-tuning selects the argmin-validation-loss checkpoint",
        passed,
        format!(
            "{} checkpoints, best #{} at step {} (argmin #{argmin}), validation accuracy {:.4}, holdout accuracy {:.4}",
            losses.len(),
            result.best_index,
            result.best().step,
            result.validation_metrics.accuracy,
            holdout_metrics.accuracy
        ),
        start.elapsed() + f.setup_time,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_06_scaling_study_loss_falls_with_data() {
    let start = Instant::now();
    let f = fixture();
    let task = Task::Binary;
    let train = separable_documents(400, 7, "sc").unwrap();
    let validation = separable_documents(40, 8, "scv").unwrap();
    let holdout = separable_documents(100, 9, "sch").unwrap();
    let fresh = Model::new(f.base.model.config.clone(), 5).unwrap();
    let inits = vec![
        ("fresh".to_string(), fresh),
        ("pretrained".to_string(), f.base.model.clone()),
    ];
    let fractions = [0.05, 0.25, 1.0];
    let config = TrainingConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 3,
        eval_checkpoints: 5,
        ..TrainingConfig::default()
    };
    let study = scaling_study(
        &config,
        &fractions,
        &inits,
        ScalingData {
            tokenizer: &f.tokenizer,
            task: &task,
            train: &train,
            validation: &validation,
            holdout: &holdout,
        },
        13,
    )
    .unwrap();
    let sets: Vec<BTreeSet<&String>> = study.subsets.iter().map(|s| s.iter().collect()).collect();
    let sizes: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    let nested = sets.windows(2).all(|w| w[0].is_subset(&w[1])) && sizes == [20, 100, 400];
    let mut detail = Vec::new();
    let mut monotone = true;
    for (name, _) in &inits {
        let loss_at = |fr: f64| {
            study
                .rows
                .iter()
                .find(|r| &r.init_name == name && r.fraction == fr)
                .map(|r| r.log_loss)
                .unwrap()
        };
        let (small, full) = (loss_at(0.05), loss_at(1.0));
        monotone &= full <= small;
        detail.push(format!(
            "{name}: {small:.4} at 0.05, {:.4} at 0.25, {full:.4} at 1.0",
            loss_at(0.25)
        ));
    }
    report(
        6,
        "hold-out log-loss at full data is no worse than at 5%",
        nested && monotone,
        format!(
            "subset sizes {sizes:?} nested: {nested}; {}",
            detail.join("; ")
        ),
        start.elapsed() + f.setup_time,
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_07_cbtfidf_matches_hand_and_oracle() {
    let start = Instant::now();
    // Cluster 1 holds one document where "alpha" appears twice among three
    // words; "alpha" occurs nowhere else; four documents in total.
    let scheme = LabelScheme::osti();
    let docs: Vec<Document> = [
        ("a", "alpha alpha beta"),
        ("b", "gamma"),
        ("c", "delta"),
        ("d", "epsilon"),
    ]
    .iter()
    .map(|(id, text)| Document::new(*id, *text, vec![], &scheme).unwrap())
    .collect();
    let assignment = ClusterAssignment {
        ids: docs.iter().map(|d| d.id.clone()).collect(),
        labels: vec![Some(1), Some(2), None, None],
        n_clusters: 2,
    };
    let summary = cbtfidf_topics(&assignment, &docs, 3).unwrap();
    let alpha = summary.clusters[0]
        .words
        .iter()
        .find(|(w, _)| w == "alpha")
        .unwrap()
        .1;
    let hand = (2.0 / 3.0) * 2f64.ln();
    let hand_error = (alpha - hand).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let vocabulary: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_classes = rng.gen_range(1..6);
        let classes: Vec<Vec<String>> = (0..n_classes)
            .map(|_| {
                (0..rng.gen_range(1..40))
                    .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())].clone())
                    .collect()
            })
            .collect();
        let m = rng.gen_range(n_classes..n_classes + 50);
        let scores = cbtfidf_scores(&classes, m).unwrap();
        for (i, class) in classes.iter().enumerate() {
            for word in class {
                let t_i = class.iter().filter(|w| *w == word).count() as f64;
                let all: f64 = classes
                    .iter()
                    .map(|c| c.iter().filter(|w| *w == word).count() as f64)
                    .sum();
                let expected = t_i / class.len() as f64 * (m as f64 / all).ln();
                worst = worst.max((scores[i][word] - expected).abs());
            }
        }
    }
    report(
        7,
        "cb-TF-IDF scores match the hand example and an oracle",
        hand_error <= 1e-12 && worst <= 1e-12,
        format!("hand example {alpha:.15} vs {hand:.15}, random-corpus max deviation {worst:.2e}"),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_08_tokenizer_round_trip_and_determinism() {
    let start = Instant::now();
    let corpus = general_texts(200, 21);
    let first = Tokenizer::train(&corpus, 400).unwrap();
    let second = Tokenizer::train(&corpus, 400).unwrap();
    let deterministic = first.vocab_file_contents() == second.vocab_file_contents()
        && first.merges_file_contents() == second.merges_file_contents();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(0..40);
        let s: String = (0..len)
            .map(|_| match rng.gen_range(0..4) {
                0 => rng.gen_range(' '..='~'),
                1 => ['\n', '\t', ' ', '\u{a0}'][rng.gen_range(0..4)],
                2 => rng.gen_range('\u{80}'..='\u{7ff}'),
                _ => loop {
                    if let Some(c) = char::from_u32(rng.gen_range(0x800..0x11_0000)) {
                        break c;
                    }
                },
            })
            .collect();
        if first.decode(&first.encode(&s), false).ok().as_deref() != Some(s.as_str()) {
            failures += 1;
        }
    }
    report(
        8,
        "decode(encode(s)) == s and training is deterministic",
        failures == 0 && deterministic,
        format!("{failures} of 1000 round trips failed, identical retrain: {deterministic}"),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_09_label_map() {
    let start = Instant::now();
    // Codes typed from the subject category table, NFC-related ones marked.
    let nfc: BTreeSet<i64> = [5, 7, 11, 12, 21, 22, 38, 46, 73].into();
    let table: [i64; 60] = [
        1, 2, 3, 4, 5, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 20, 21, 22, 24, 25, 29, 30, 32, 33,
        35, 36, 37, 38, 39, 40, 42, 43, 44, 45, 46, 47, 54, 55, 56, 57, 58, 59, 60, 61, 62, 63, 66,
        70, 71, 72, 73, 74, 75, 77, 79, 96, 97, 98, 99,
    ];
    let scheme = LabelScheme::osti();
    let mut mismatches = Vec::new();
    for code in table {
        match map_binary_label(code, &scheme) {
            Ok(v) if v == nfc.contains(&code) => {}
            other => mismatches.push(format!("{code}: {other:?}")),
        }
    }
    let covered: BTreeSet<i64> = scheme.all_categories.keys().copied().collect();
    let exact_cover = covered == table.iter().copied().collect::<BTreeSet<_>>();
    let unknown_rejected = [0, 6, 41, 100, -1]
        .iter()
        .all(|&c| matches!(map_binary_label(c, &scheme), Err(Error::UnknownCategory(x)) if x == c));
    let true_codes: Vec<i64> = table
        .iter()
        .copied()
        .filter(|&c| map_binary_label(c, &scheme).unwrap_or(false))
        .collect();
    report(
        9,
        "exactly the nine NFC codes map to true, unknown codes error",
        mismatches.is_empty() && exact_cover && unknown_rejected && true_codes.len() == 9,
        format!(
            "NFC codes {true_codes:?}; {} table codes covered exactly: {exact_cover}; unknown rejected: {unknown_rejected}",
            covered.len()
        ),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_10_grid_minimum_reproduces_standalone() {
    let start = Instant::now();
    let f = fixture();
    let task = Task::Binary;
    let docs = separable_documents(200, 31, "grid").unwrap();
    let examples = encode_examples(&f.tokenizer, &docs, &task, 64).unwrap();
    let (train, validation) = examples.split_at(160);
    let base = TrainingConfig {
        epochs: 2,
        eval_checkpoints: 4,
        ..TrainingConfig::default()
    };
    let rows = hyperparameter_grid(
        &base,
        &GRID_LEARNING_RATES,
        &GRID_BATCH_SIZES,
        &f.base.model,
        &task,
        train,
        validation,
    )
    .unwrap();
    let cells: BTreeSet<(u64, usize)> = rows
        .iter()
        .map(|r| (r.learning_rate.to_bits(), r.batch_size))
        .collect();
    let best = best_grid_row(&rows).unwrap();
    let standalone = TrainingConfig {
        learning_rate: best.learning_rate,
        batch_size: best.batch_size,
        ..base
    };
    let rerun =
        finetune_classifier(&standalone, &f.base.model, &task, train, validation, None).unwrap();
    let difference = (rerun.best().validation_loss - best.loss).abs();
    let min_loss = rows.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    let passed = rows.len() == 6
        && cells.len() == 6
        && rows.iter().all(|r| r.is_ok())
        && best.loss == min_loss
        && difference <= 1e-10;
    report(
        10,
        "3x2 grid has six rows and its best cell reruns identically",
        passed,
        format!(
            "{} rows, best lr {:e} batch {} loss {:.10}, standalone difference {difference:.2e}",
            rows.len(),
            best.learning_rate,
            best.batch_size,
            best.loss
        ),
        start.elapsed() + f.setup_time,
        Duration::from_secs(900),
    );
}

#[test]
fn criterion_11_mask_predict_recovers_a_memorized_token() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sentence = "the enriched uranium fissions the neutron in the core .";
    let scheme = LabelScheme::osti();
    let docs: Vec<Document> = (0..200)
        .map(|i| Document::new(format!("m{i:03}"), sentence, vec![], &scheme).unwrap())
        .collect();
    let corpus = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &docs).unwrap();
    let bin = env!("CARGO_BIN_EXE_dapt");
    let run = |args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "dapt {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    run(&[
        "tokenizer-train",
        "--corpus",
        "corpus.jsonl",
        "--vocab-size",
        "300",
        "--out",
        "tok",
    ]);
    // Short runs stall at unigram statistics before attention starts to use
    // context, so this needs a couple of thousand steps to memorize.
    #[rustfmt::skip]
    run(&[
        "pretrain", "--corpus", "corpus.jsonl", "--tokenizer", "tok", "--out", "run",
        "--total_steps", "2000", "--learning_rate", "1e-3", "--batch_size", "4",
        "--segment_length", "32", "--max_positions", "64", "--max_seq_len", "64",
        "--hidden_dim", "64", "--ff_dim", "128", "--num_heads", "2",
    ]);
    let stdout = run(&[
        "mask-predict",
        "--checkpoint",
        "run/checkpoints/final.ckpt",
        "--text",
        "the enriched<mask> fissions the neutron in the core .",
        "--k",
        "5",
    ]);
    let rows: Vec<(String, f64)> = stdout
        .lines()
        .skip(1)
        .filter_map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            Some((cols.get(1)?.to_string(), cols.get(2)?.parse().ok()?))
        })
        .collect();
    let (top, score) = rows.first().cloned().unwrap_or_default();
    report(
        11,
        "mask-predict ranks the memorized token first with high confidence",
        rows.len() == 5 && top.trim() == "uranium" && score > 0.9,
        format!("top prediction {top:?} with score {score:.4}"),
        start.elapsed(),
        Duration::from_secs(120),
    );
}
