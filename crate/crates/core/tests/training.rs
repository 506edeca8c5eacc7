use rand::seq::SliceRandom;

use text2tree_core::dataset::{Dataset, SplitName};
use text2tree_core::generator::{generate, GeneratorSpec};
use text2tree_core::hlr::GateMode;
use text2tree_core::label_tree::CodeTree;
use text2tree_core::objectives::Task;
use text2tree_core::optim::AdamW;
use text2tree_core::rng::{stream, Stream};
use text2tree_core::tape::Tape;
use text2tree_core::text_encoder::{self, Vocabulary};
use text2tree_core::trainer::{
    self, grid_search, train, GradPolicy, Mode, Model, Prepared, SimilaritySource, TrainingConfig,
};
use text2tree_core::Error;

fn corpus(samples: usize, seed: u64) -> (Dataset, CodeTree) {
    generate(&GeneratorSpec {
        num_samples: samples,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn quick(mode: Mode) -> TrainingConfig {
    TrainingConfig {
        mode,
        d: 8,
        d_enc: 8,
        max_epochs: 3,
        ..Default::default()
    }
}

#[test]
fn training_stops_when_patience_runs_out() {
    let (ds, tree) = corpus(600, 1);
    let config = TrainingConfig {
        lr: 0.0,
        weight_decay: 0.0,
        patience: 3,
        max_epochs: 20,
        ..quick(Mode::Text2Tree)
    };
    let trained = train(&config, &ds, &tree).unwrap();
    assert_eq!(trained.best_epoch, 1);
    assert_eq!(trained.epochs_run, 4);
    assert_eq!(trained.dev_report.epoch_log.len(), 4);
}

#[test]
fn best_checkpoint_is_restored() {
    let (ds, tree) = corpus(800, 2);
    let config = TrainingConfig {
        max_epochs: 6,
        ..quick(Mode::Text2Tree)
    };
    let trained = train(&config, &ds, &tree).unwrap();
    let dev = trained.evaluate(&ds, &tree, SplitName::Dev, config.max_len).unwrap();
    assert_eq!(dev.macro_f1, trained.dev_report.macro_f1);
    let best = trained
        .dev_report
        .epoch_log
        .iter()
        .map(|e| e.dev_macro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best, dev.macro_f1);
}

/// Cross-entropy training written out by hand from the public pieces.
fn plain_ce_losses(config: &TrainingConfig, ds: &Dataset, tree: &CodeTree) -> Vec<f64> {
    let train_idx = ds.split(SplitName::Train).to_vec();
    let vocab = Vocabulary::build(train_idx.iter().map(|&i| ds.records[i].text.as_str()), config.min_freq);
    let prepared = Prepared::new(ds, tree, &vocab, config.max_len).unwrap();
    let mut model = Model::init(tree, vocab.len(), config).unwrap();
    let mut opt = AdamW::new(config.adamw());
    let mut shuffle = stream(config.seed, Stream::Shuffle);
    let mut order = train_idx;
    let mut losses = Vec::new();
    for _ in 0..config.max_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            let batch = prepared.batch(chunk);
            let mut tape = Tape::new();
            let vars = model.encoder.register(&mut tape, true);
            let z = text_encoder::encode_on_tape(&mut tape, &vars, &batch.sequences).unwrap();
            let logits = text_encoder::classify_on_tape(&mut tape, &vars, z);
            let y = tape.constant(batch.targets.clone());
            let loss = tape.softmax_ce(logits, y);
            losses.push(tape.value(loss).item());
            let grads = tape.backward(loss);
            let e = &mut model.encoder;
            let leaves = [vars.token_embeddings, vars.head_w1, vars.head_b1, vars.head_w2, vars.head_b2];
            let mut params = [&mut e.token_embeddings, &mut e.head_w1, &mut e.head_b1, &mut e.head_w2, &mut e.head_b2];
            let g: Vec<_> = leaves
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            opt.step(&mut params, &g, &[true; 5]);
        }
    }
    losses
}

#[test]
fn finetune_is_plain_cross_entropy() {
    let (ds, tree) = corpus(700, 3);
    let config = TrainingConfig {
        max_epochs: 2,
        patience: 5,
        ..quick(Mode::Finetune)
    };
    let trained = train(&config, &ds, &tree).unwrap();
    let expected = plain_ce_losses(&config, &ds, &tree);
    assert_eq!(trained.step_losses.len(), expected.len());
    for (a, b) in trained.step_losses.iter().zip(&expected) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn no_dml_with_indicator_similarity_is_scl() {
    let (ds, tree) = corpus(700, 4);
    let base = TrainingConfig {
        max_epochs: 2,
        lambda_loss: 0.3,
        ..quick(Mode::Scl)
    };
    let scl = train(&base, &ds, &tree).unwrap();
    let no_dml = train(
        &TrainingConfig {
            mode: Mode::NoDml,
            similarity: SimilaritySource::Indicator,
            ..base.clone()
        },
        &ds,
        &tree,
    )
    .unwrap();
    assert_eq!(scl.step_losses.len(), no_dml.step_losses.len());
    for (a, b) in scl.step_losses.iter().zip(&no_dml.step_losses) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn losses_stay_finite_under_every_policy() {
    let (ds, tree) = corpus(5000, 5);
    for policy in [GradPolicy::DetachDml, GradPolicy::DetachSsl, GradPolicy::NoDetach] {
        let config = TrainingConfig {
            grad_policy: policy,
            max_epochs: 2,
            ..TrainingConfig::default()
        };
        let trained = train(&config, &ds, &tree).unwrap();
        assert!(trained.step_losses.len() >= 200);
        assert!(trained.step_losses.iter().all(|l| l.is_finite()), "{policy}");
        assert!(trained.model.is_finite());
    }
}

#[test]
fn training_is_deterministic() {
    let (ds, tree) = corpus(600, 6);
    for mode in [Mode::Text2Tree, Mode::Mixup { alpha: 0.4 }] {
        let config = quick(mode);
        let a = train(&config, &ds, &tree).unwrap();
        let b = train(&config, &ds, &tree).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.dev_report, b.dev_report);
        assert_eq!(a.step_losses, b.step_losses);
    }
}

#[test]
fn multi_label_training_runs() {
    let (ds, tree) = generate(&GeneratorSpec {
        num_samples: 600,
        task: Task::MultiLabel,
        labels_per_record: 2.0,
        ..Default::default()
    })
    .unwrap();
    for mode in [Mode::Text2Tree, Mode::NoHlr { alpha: 1.0 }] {
        let config = TrainingConfig {
            task: Task::MultiLabel,
            ..quick(mode)
        };
        let trained = train(&config, &ds, &tree).unwrap();
        let test = trained.evaluate(&ds, &tree, SplitName::Test, config.max_len).unwrap();
        assert!(test.micro_f1.is_finite());
        assert_eq!(test.per_label_f1.len(), 40);
    }
}

#[test]
fn mismatched_task_is_rejected() {
    let (ds, tree) = corpus(300, 7);
    let config = TrainingConfig {
        task: Task::MultiLabel,
        ..quick(Mode::Finetune)
    };
    assert!(matches!(train(&config, &ds, &tree), Err(Error::InvalidConfig(_))));
}

#[test]
fn generated_statistics_match_spec() {
    let spec = GeneratorSpec::default();
    let (ds, tree) = generate(&spec).unwrap();
    let stats = ds.statistics();
    assert_eq!(stats.num_records, 5000);
    assert_eq!(stats.num_labels, 40);
    assert_eq!(tree.num_targets(), 40);
    assert_eq!(tree.max_level(), 3);
    let want_tokens = (spec.min_len + spec.max_len) as f64 / 2.0;
    assert!((stats.mean_tokens / want_tokens - 1.0).abs() < 0.05);
    assert_eq!(stats.mean_labels, 1.0);

    let counts = ds.label_counts(&(0..ds.len()).collect::<Vec<_>>());
    let mut freq: Vec<usize> = counts.values().copied().collect();
    freq.sort_unstable_by(|a, b| b.cmp(a));
    let top: usize = freq.iter().take(10).sum();
    assert!((top as f64 / 5000.0 - spec.skew).abs() < 0.05 * spec.skew);

    let multi = GeneratorSpec {
        task: Task::MultiLabel,
        labels_per_record: 2.0,
        ..Default::default()
    };
    let (ds, _) = generate(&multi).unwrap();
    assert!((ds.statistics().mean_labels / 2.0 - 1.0).abs() < 0.05);
}

#[test]
fn stratified_split_is_exact_per_label() {
    let (ds, _) = corpus(5000, 8);
    let all = ds.label_counts(&(0..ds.len()).collect::<Vec<_>>());
    let test = ds.label_counts(ds.split(SplitName::Test));
    let dev = ds.label_counts(ds.split(SplitName::Dev));
    for (label, &n) in &all {
        let t = test.get(label).copied().unwrap_or(0) as f64;
        let d = dev.get(label).copied().unwrap_or(0) as f64;
        assert!((t - 0.2 * n as f64).abs() <= 1.0);
        assert!((d - 0.16 * n as f64).abs() <= 1.0);
    }
}

#[test]
fn grid_search_keeps_the_best_cell() {
    let (ds, tree) = corpus(500, 9);
    let template = TrainingConfig {
        max_epochs: 2,
        ..quick(Mode::Text2Tree)
    };
    let result = grid_search(&template, &ds, &tree, &[0.5, 2.0], &[0.05], &[3e-3, 1e-2]).unwrap();
    assert_eq!(result.cells.len(), 4);
    let best = result
        .cells
        .iter()
        .map(|c| c.dev_macro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(result.cells[result.best_index].dev_macro_f1, best);
    let cell = &result.cells[result.best_index];
    assert_eq!((result.best.tau, result.best.lr), (cell.tau, cell.lr));
    assert!(grid_search(&template, &ds, &tree, &[], &[0.05], &[1e-3]).is_err());
}

#[test]
fn loss_on_tape_rejects_single_sample_contrastive_batch() {
    let (ds, tree) = corpus(300, 10);
    let vocab = Vocabulary::build(ds.records.iter().map(|r| r.text.as_str()), 1);
    let prepared = Prepared::new(&ds, &tree, &vocab, 64).unwrap();
    let config = quick(Mode::Scl);
    let model = Model::init(&tree, vocab.len(), &config).unwrap();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let batch = prepared.batch(&[0]);
    let err = trainer::loss_on_tape(&mut tape, &vars, &tree, &config, &batch, GateMode::StraightThrough).unwrap_err();
    assert_eq!(err, Error::BatchTooSmall(1));
}

#[test]
fn hundred_label_corpus_matches_top_ten_share() {
    for seed in 0..3 {
        let (ds, tree) = generate(&GeneratorSpec {
            branching: vec![4, 5, 5],
            num_labels: 100,
            num_samples: 5000,
            seed,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(tree.num_targets(), 100);
        let counts = ds.label_counts(&(0..ds.len()).collect::<Vec<_>>());
        let mut freq: Vec<usize> = counts.values().copied().collect();
        freq.sort_unstable_by(|a, b| b.cmp(a));
        let top = freq.iter().take(10).sum::<usize>() as f64 / 5000.0;
        assert!((top - 0.402).abs() <= 0.02, "seed {seed}: {top}");
    }
}
