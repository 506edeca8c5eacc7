//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use text2tree_core::dataset::SplitName;
use text2tree_core::generator::{generate, GeneratorSpec};
use text2tree_core::gradcheck::{self, GradCheckOptions};
use text2tree_core::hlr::compute_representations;
use text2tree_core::label_similarity::ClampMode;
use text2tree_core::label_tree::NodeId;
use text2tree_core::metrics::{self, MetricsReport};
use text2tree_core::objectives::{self, EncodedBatch, Reduction, Task};
use text2tree_core::text_encoder::PoolingKind;
use text2tree_core::trainer::{self, BatchInput, GradPolicy, Mode, Model, TrainingConfig};
use text2tree_core::Matrix;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let tree = seven_node_tree();
    let mut r = rng(11);
    let vocab = 12;
    let n = 8;
    let classes: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let batch = BatchInput {
        sequences: (0..n)
            .map(|_| (0..r.random_range(1..6)).map(|_| r.random_range(2..vocab)).collect())
            .collect(),
        targets: one_hot(&classes, 4),
        label_sets: classes.iter().map(|&c| vec![tree.targets()[c].0]).collect(),
        pairing: Some(random_permutation(&mut r, n)),
        mixup_lambda: None,
    };
    let mut worst = 0.0f64;
    for policy in [GradPolicy::DetachDml, GradPolicy::DetachSsl, GradPolicy::NoDetach] {
        for pooling in [PoolingKind::Mean, PoolingKind::SelfAttention] {
            let config = TrainingConfig {
                d: 4,
                d_enc: 4,
                grad_policy: policy,
                lambda_loss: 0.4,
                tau: 1.0,
                embed_std: 0.8,
                label_std: 1.0,
                pooling,
                ..Default::default()
            };
            let model = Model::init(&tree, vocab, &config).map_err(|e| e.to_string())?;
            let report = gradcheck::check(&model, &tree, &config, &batch, &GradCheckOptions::default())
                .map_err(|e| e.to_string())?;
            for b in &report.blocks {
                ensure(
                    b.max_rel_error < 1e-4,
                    format!("{policy} {pooling:?}: block {} error {:.3e}", b.name, b.max_rel_error),
                )?;
                ensure(b.checked > 0, format!("block {} not checked", b.name))?;
            }
            ensure(report.blocks.len() == model.blocks().len(), "missing parameter blocks")?;
            worst = worst.max(report.max_rel_error());
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {worst:.2e} over 3 policies, {elapsed:.2?}"))
}

fn scl_reduction() -> Outcome {
    let mut r = rng(22);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 16;
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        let z = gaussian(&mut r, n, 6);
        let tau = r.random_range(0.2..3.0);
        let scl = objectives::scl_loss(&z, &labels, tau, Reduction::Mean).map_err(|e| e.to_string())?;
        let sim = objectives::indicator_similarity(&one_hot(&labels, 5));
        let ssl = objectives::ssl_loss(&z, &sim, tau, Reduction::Mean).map_err(|e| e.to_string())?;
        let oracle = scl_oracle(&z, &labels, tau);
        worst = worst.max((ssl - scl).abs()).max((scl - oracle).abs());
    }
    ensure(worst < 1e-9, format!("max difference {worst:.3e}"))?;
    Ok(format!("100 batches, max |ssl - scl| {worst:.2e}"))
}

fn straight_through_equality() -> Outcome {
    let mut r = rng(33);
    let mut dropped = 0;
    for draw in 0..100 {
        let size = r.random_range(2..14);
        let tree = random_tree(&mut r, size);
        let d = r.random_range(1..6);
        let p = random_params(&tree, d, &mut r);
        let got = compute_representations(&tree, &p).map_err(|e| e.to_string())?;
        let want = hard_mask_representations(&tree, &p);
        let same = got.h.as_slice().iter().zip(want.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("draw {draw} differs"))?;
        dropped += p.selected_siblings(&tree).iter().enumerate().skip(1).map(|(i, s)| {
            tree.siblings(NodeId(i)).unwrap().len() - s.len()
        }).sum::<usize>();
    }
    ensure(dropped > 0, "no draw dropped a sibling")?;
    Ok(format!("100 draws bit-identical, {dropped} sibling keys masked"))
}

fn influence_locality() -> Outcome {
    let mut r = rng(44);
    let mut triples = 0;
    while triples < 50 {
        let size = r.random_range(4..16);
        let tree = random_tree(&mut r, size);
        let p = random_params(&tree, 3, &mut r);
        let i = NodeId(r.random_range(1..tree.len()));
        let closure = influence_closure(&tree, &p, i);
        let outside: Vec<usize> = (0..tree.len()).filter(|j| !closure.contains(j)).collect();
        if outside.is_empty() {
            continue;
        }
        triples += 1;
        let base = compute_representations(&tree, &p).map_err(|e| e.to_string())?.h;
        let perturb = |node: usize, r: &mut rand_chacha::ChaCha8Rng| -> Result<Matrix, String> {
            let mut q = p.clone();
            for v in q.label_embeddings.row_mut(node) {
                *v += r.random_range(0.1..1.0);
            }
            Ok(compute_representations(&tree, &q).map_err(|e| e.to_string())?.h)
        };
        let bits = |m: &Matrix| m.row(i.0).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let out = outside[r.random_range(0..outside.len())];
        ensure(
            bits(&perturb(out, &mut r)?) == bits(&base),
            format!("node {} moved when perturbing {out}", i.0),
        )?;
        let inside = closure[r.random_range(0..closure.len())];
        ensure(
            bits(&perturb(inside, &mut r)?) != bits(&base),
            format!("node {} unchanged when perturbing {inside}", i.0),
        )?;
    }
    Ok("50 triples local".into())
}

fn dml_algebra() -> Outcome {
    ensure(objectives::dml_weight(1.0) == 1.0, "sim 1")?;
    ensure(objectives::dml_weight(0.0) == 0.5, "sim 0")?;
    ensure(objectives::dml_weight(-1.0) == 0.0, "sim -1")?;
    let mut r = rng(55);
    let mut worst = 0.0f64;
    let mut mixes = 0;
    while mixes < 1000 {
        let n = r.random_range(2..12);
        let c = r.random_range(2..6);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let batch = EncodedBatch::new(
            gaussian(&mut r, n, 3),
            one_hot(&labels, c),
            labels.iter().map(|&l| vec![l + 1]).collect(),
            Task::MultiClass,
        )
        .map_err(|e| e.to_string())?;
        let raw = gaussian(&mut r, n, 4);
        let sim = text2tree_core::label_similarity::SimilarityMatrix {
            values: text2tree_core::label_similarity::cosine_matrix(&raw),
            clamp_mode: ClampMode::Raw,
        };
        let mixed = objectives::dml_mix(&batch, &sim, &random_permutation(&mut r, n)).map_err(|e| e.to_string())?;
        for i in 0..n {
            worst = worst.max((mixed.y_tilde.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        mixes += n;
    }
    ensure(worst <= 1e-12, format!("row sum off by {worst:.3e}"))?;
    Ok(format!("lambda(1, 0, -1) = (1, 0.5, 0); {mixes} mixed rows, max |sum - 1| {worst:.1e}"))
}

fn metric_oracle() -> Outcome {
    let mut r = rng(66);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let rows = r.random_range(1..40);
        let cols = r.random_range(1..25);
        let p_pred = r.random_range(0.05..0.6);
        let pred = random_table(&mut r, rows, cols, p_pred);
        let p_gold = r.random_range(0.05..0.6);
        let gold = random_table(&mut r, rows, cols, p_gold);
        let counts: Vec<usize> = (0..cols).map(|_| r.random_range(0..50)).collect();
        let report = metrics::score(&pred, &gold, &metrics::frequency_groups(&counts)).map_err(|e| e.to_string())?;
        let oracle = f1_oracle(&pred, &gold);
        worst = worst
            .max((report.macro_f1 - oracle.macro_f1).abs())
            .max((report.micro_f1 - oracle.micro_f1).abs());
        for (a, b) in report.per_label_f1.iter().zip(&oracle.per_label) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, format!("max difference {worst:.3e}"))?;
    Ok(format!("200 tables, max difference {worst:.1e}"))
}

struct RunSummary {
    finetune: MetricsReport,
    text2tree: MetricsReport,
}

fn run_mode(mode: Mode, seed: u64) -> Result<MetricsReport, String> {
    let spec = GeneratorSpec {
        seed,
        ..Default::default()
    };
    let (dataset, tree) = generate(&spec).map_err(|e| e.to_string())?;
    let config = TrainingConfig {
        mode,
        seed,
        ..Default::default()
    };
    let trained = trainer::train(&config, &dataset, &tree).map_err(|e| e.to_string())?;
    trained
        .evaluate(&dataset, &tree, SplitName::Test, config.max_len)
        .map_err(|e| e.to_string())
}

fn experiment() -> Result<Vec<RunSummary>, String> {
    (0..5)
        .map(|seed| {
            Ok(RunSummary {
                finetune: run_mode(Mode::Finetune, seed)?,
                text2tree: run_mode(Mode::Text2Tree, seed)?,
            })
        })
        .collect()
}

fn end_to_end(runs: &[RunSummary], elapsed: Duration) -> Outcome {
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&RunSummary) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let ft = mean(&|r| r.finetune.macro_f1);
    let t2t = mean(&|r| r.text2tree.macro_f1);
    let rare = mean(&|r| r.text2tree.group_f1[0] - r.finetune.group_f1[0]);
    let summary = format!(
        "macro-F1 text2tree {t2t:.4} vs finetune {ft:.4}, rarest-group delta {rare:+.4}, {elapsed:.1?}"
    );
    ensure(t2t > ft, summary.clone())?;
    ensure(rare >= 0.0, summary.clone())?;
    ensure(elapsed < Duration::from_secs(300), summary.clone())?;
    Ok(summary)
}

fn ablations() -> Outcome {
    let mut parts = Vec::new();
    for mode in [Mode::NoSsl, Mode::NoDml, Mode::NoHlr { alpha: 1.0 }] {
        let report = run_mode(mode, 0)?;
        ensure(report.macro_f1.is_finite() && report.micro_f1.is_finite(), format!("{mode}: non-finite"))?;
        ensure(report.per_label_f1.len() == 40 && report.group_f1.len() == 4, format!("{mode}: report shape"))?;
        parts.push(format!("{mode} {:.4}", report.macro_f1));
    }
    Ok(parts.join(", "))
}

fn bits(r: &MetricsReport) -> Vec<u64> {
    let mut v = vec![r.macro_f1.to_bits(), r.micro_f1.to_bits()];
    v.extend(r.per_label_f1.iter().map(|x| x.to_bits()));
    v.extend(r.group_f1.iter().map(|x| x.to_bits()));
    v
}

fn determinism(first: &[RunSummary]) -> Outcome {
    let second = experiment()?;
    for (seed, (a, b)) in first.iter().zip(&second).enumerate() {
        ensure(bits(&a.finetune) == bits(&b.finetune), format!("finetune seed {seed} differs"))?;
        ensure(bits(&a.text2tree) == bits(&b.text2tree), format!("text2tree seed {seed} differs"))?;
    }
    Ok("5 seeds x 2 modes bit-identical on repeat".into())
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient fidelity", gradient_fidelity()),
        ("2 SCL reduction", scl_reduction()),
        ("3 straight-through forward equality", straight_through_equality()),
        ("4 influence locality", influence_locality()),
        ("5 DML algebra", dml_algebra()),
        ("6 metric oracle", metric_oracle()),
    ];
    let start = Instant::now();
    let runs = experiment();
    let elapsed = start.elapsed();
    match &runs {
        Ok(runs) => {
            results.push(("7 end-to-end synthetic experiment", end_to_end(runs, elapsed)));
            results.push(("8 ablation coherence", ablations()));
            results.push(("9 determinism", determinism(runs)));
        }
        Err(e) => {
            results.push(("7 end-to-end synthetic experiment", Err(e.clone())));
            results.push(("8 ablation coherence", ablations()));
            results.push(("9 determinism", Err("experiment failed".into())));
        }
    }
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
