use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use text2tree::checkpoint::{self, Checkpoint};
use text2tree::error::{exit_code, Validation};
use text2tree::{config, data, export, report, tree_io};
use text2tree_core::dataset::SplitName;
use text2tree_core::fmt::g17;
use text2tree_core::generator::{generate, GeneratorSpec};
use text2tree_core::gradcheck::{self, GradCheckOptions};
use text2tree_core::hlr::{compute_representations, GateMode};
use text2tree_core::label_similarity::{pairwise_sim, ClampMode};
use text2tree_core::label_tree::CodeTree;
use text2tree_core::rng::{stream, Stream};
use text2tree_core::trainer::{
    self, grid_search, train_with, Model, Prepared, TrainingConfig, DEFAULT_LAMBDA_GRID, DEFAULT_TAU_GRID,
};

#[derive(Parser)]
#[command(name = "text2tree", version, about = "Hierarchy-aware text classification on a code tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct TreeFiles {
    /// `child<TAB>parent` edge list.
    #[arg(long)]
    edges: PathBuf,
    /// One target code per line.
    #[arg(long)]
    targets: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic corpus and its code tree.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Code-tree utilities.
    Tree {
        #[command(subcommand)]
        command: TreeCommand,
    },
    /// Trains a model and writes a checkpoint, reports and a JSON summary.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeFiles,
        #[arg(long)]
        data: PathBuf,
        /// `code<TAB>text` descriptions used to initialise label embeddings.
        #[arg(long)]
        label_texts: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Scores a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeFiles,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Writes the text report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Trains every (tau, lambda_loss, lr) cell and keeps the best on dev.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeFiles,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Exports label representations and the target-label similarity matrix.
    SimMatrix {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeFiles,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        representations: Option<PathBuf>,
        /// Keep negative cosines instead of clamping at zero.
        #[arg(long)]
        raw: bool,
    },
    /// Compares analytic and finite-difference gradients of the training loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tree: TreeFiles,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Subcommand)]
enum TreeCommand {
    /// Checks that the edges form a tree rooted at ROOT and the targets exist.
    Validate {
        #[command(flatten)]
        tree: TreeFiles,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out_dir } => gen_data(&common, &out_dir),
        Command::Tree {
            command: TreeCommand::Validate { tree },
        } => validate_tree(&tree),
        Command::Train {
            common,
            tree,
            data,
            label_texts,
            out_dir,
        } => train_cmd(&common, &tree, &data, label_texts.as_deref(), &out_dir),
        Command::Eval {
            common,
            tree,
            data,
            checkpoint,
            split,
            report,
            summary,
        } => eval_cmd(&common, &tree, &data, &checkpoint, &split, report.as_deref(), summary.as_deref()),
        Command::GridSearch {
            common,
            tree,
            data,
            taus,
            lambdas,
            lrs,
            out_dir,
        } => grid_cmd(&common, &tree, &data, taus, lambdas, lrs, &out_dir),
        Command::SimMatrix {
            common,
            tree,
            checkpoint,
            out,
            representations,
            raw,
        } => sim_cmd(&common, &tree, &checkpoint, &out, representations.as_deref(), raw),
        Command::Gradcheck {
            common,
            tree,
            data,
            batch,
            tolerance,
        } => gradcheck_cmd(&common, &tree, &data, batch, tolerance),
    }
}

fn split_setting(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Validation(format!("--set expects KEY=VALUE, got `{s}`")).into())
}

fn training_config(common: &Common) -> Result<TrainingConfig> {
    let mut c = TrainingConfig::default();
    if let Some(path) = &common.config {
        config::apply_training_file(path, &mut c)?;
    }
    for s in &common.set {
        let (k, v) = split_setting(s)?;
        c.set(k, v).with_context(|| format!("--set {s}"))?;
    }
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn generator_spec(common: &Common) -> Result<GeneratorSpec> {
    let mut spec = GeneratorSpec::default();
    if let Some(path) = &common.config {
        config::apply_generator_file(path, &mut spec)?;
    }
    for s in &common.set {
        let (k, v) = split_setting(s)?;
        config::set_generator(&mut spec, k, v).map_err(|e| Validation(format!("--set {s}: {e}")))?;
    }
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn load_tree(files: &TreeFiles) -> Result<CodeTree> {
    let tree = tree_io::load_tree(&files.edges, &files.targets)?;
    for w in tree.warnings() {
        log::warn!("{w}");
    }
    Ok(tree)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(common: &Common, out_dir: &Path) -> Result<()> {
    let spec = generator_spec(common)?;
    let (ds, tree) = generate(&spec)?;
    create_dir(out_dir)?;
    data::save_dataset(&ds, &out_dir.join("data.jsonl"))?;
    tree_io::write_edges(&out_dir.join("edges.tsv"), &tree)?;
    tree_io::write_targets(&out_dir.join("targets.txt"), &tree)?;
    let stats = ds.statistics();
    println!("records = {}", stats.num_records);
    println!("labels = {}", stats.num_labels);
    println!("nodes = {}", tree.len());
    println!("mean_tokens = {}", g17(stats.mean_tokens));
    println!("mean_labels = {}", g17(stats.mean_labels));
    Ok(())
}

fn validate_tree(files: &TreeFiles) -> Result<()> {
    let tree = load_tree(files)?;
    println!("nodes = {}", tree.len());
    println!("targets = {}", tree.num_targets());
    println!("depth = {}", tree.max_level());
    for k in 1..=tree.max_level() {
        println!("level_{k} = {}", tree.level(k).len());
    }
    Ok(())
}

fn load_inputs(common: &Common, files: &TreeFiles, data_path: &Path) -> Result<(TrainingConfig, CodeTree, text2tree_core::dataset::Dataset)> {
    let config = training_config(common)?;
    let tree = load_tree(files)?;
    let ds = data::load_dataset(data_path, config.task, config.seed)?;
    ds.check_labels(&tree)?;
    Ok((config, tree, ds))
}

fn train_cmd(common: &Common, files: &TreeFiles, data_path: &Path, label_texts: Option<&Path>, out_dir: &Path) -> Result<()> {
    let (config, tree, ds) = load_inputs(common, files, data_path)?;
    let texts = label_texts.map(tree_io::read_label_texts).transpose()?;
    info!("training {} on {} records", config.mode, ds.len());
    let start = Instant::now();
    let trained = train_with(&config, &ds, &tree, texts.as_ref())?;
    info!(
        "best epoch {} of {} in {:.1}s",
        trained.best_epoch,
        trained.epochs_run,
        start.elapsed().as_secs_f64()
    );
    create_dir(out_dir)?;
    checkpoint::save(&out_dir.join("model.ckpt"), &Checkpoint::from_trained(&config, &trained))?;
    data::write_vocab(&out_dir.join("vocab.txt"), &trained.vocab)?;

    let header = header(&config, &trained);
    write_text(&out_dir.join("dev_report.txt"), &report::render("dev", &header, &trained.dev_report, &tree))?;
    let test = trained.evaluate(&ds, &tree, SplitName::Test, config.max_len)?;
    write_text(&out_dir.join("test_report.txt"), &report::render("test", &header, &test, &tree))?;
    let mut summary = report::Summary::new("test", config.mode.to_string(), config.seed, &test, &tree);
    summary.best_epoch = Some(trained.best_epoch);
    summary.epochs_run = Some(trained.epochs_run);
    write_text(&out_dir.join("summary.json"), &summary.to_json())?;
    println!("dev_macro_f1 = {}", g17(trained.dev_report.macro_f1));
    println!("test_macro_f1 = {}", g17(test.macro_f1));
    println!("test_micro_f1 = {}", g17(test.micro_f1));
    Ok(())
}

fn header(config: &TrainingConfig, trained: &trainer::Trained) -> Vec<(&'static str, String)> {
    let mut h = config.to_pairs();
    h.push(("best_epoch", trained.best_epoch.to_string()));
    h.push(("epochs_run", trained.epochs_run.to_string()));
    h
}

fn parse_split(s: &str) -> Result<SplitName> {
    Ok(match s {
        "train" => SplitName::Train,
        "dev" => SplitName::Dev,
        "test" => SplitName::Test,
        other => return Err(Validation(format!("unknown split `{other}`")).into()),
    })
}

fn load_checkpoint(path: &Path, tree: &CodeTree) -> Result<Checkpoint> {
    let ckpt = checkpoint::load(path)?;
    ckpt.check_tree(tree)
        .with_context(|| format!("{} does not match the tree", path.display()))?;
    Ok(ckpt)
}

fn eval_cmd(
    common: &Common,
    files: &TreeFiles,
    data_path: &Path,
    ckpt_path: &Path,
    split: &str,
    report_path: Option<&Path>,
    summary_path: Option<&Path>,
) -> Result<()> {
    let split = parse_split(split)?;
    let tree = load_tree(files)?;
    let ckpt = load_checkpoint(ckpt_path, &tree)?;
    let seed = common.seed.unwrap_or(ckpt.config.seed);
    let ds = data::load_dataset(data_path, ckpt.config.task, seed)?;
    ds.check_labels(&tree)?;
    let prepared = Prepared::new(&ds, &tree, &ckpt.vocab, ckpt.config.max_len)?;
    let indices = ds.split(split);
    if indices.is_empty() {
        return Err(text2tree_core::Error::EmptySplit(split.as_str().into()).into());
    }
    let result = trainer::evaluate(&ckpt.model, &prepared, indices, ckpt.config.task, &ckpt.groups())?;
    let text = report::render(split.as_str(), &ckpt.config.to_pairs(), &result, &tree);
    match report_path {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = summary_path {
        let summary = report::Summary::new(split.as_str(), ckpt.config.mode.to_string(), ckpt.config.seed, &result, &tree);
        write_text(p, &summary.to_json())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn grid_cmd(
    common: &Common,
    files: &TreeFiles,
    data_path: &Path,
    taus: Option<Vec<f64>>,
    lambdas: Option<Vec<f64>>,
    lrs: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<()> {
    let (template, tree, ds) = load_inputs(common, files, data_path)?;
    let taus = taus.unwrap_or_else(|| DEFAULT_TAU_GRID.to_vec());
    let lambdas = lambdas.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    let lrs = lrs.unwrap_or_else(|| vec![template.lr]);
    info!("grid of {} cells", taus.len() * lambdas.len() * lrs.len());
    let result = grid_search(&template, &ds, &tree, &taus, &lambdas, &lrs)?;
    create_dir(out_dir)?;
    let mut table = String::from("tau\tlambda_loss\tlr\tdev_macro_f1\tdev_micro_f1\n");
    for c in &result.cells {
        writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}",
            g17(c.tau),
            g17(c.lambda_loss),
            g17(c.lr),
            g17(c.dev_macro_f1),
            g17(c.dev_micro_f1)
        )
        .unwrap();
    }
    write_text(&out_dir.join("grid.tsv"), &table)?;
    write_text(&out_dir.join("best.cfg"), &result.best.to_string())?;
    println!("best_index = {}", result.best_index);
    println!("tau = {}", g17(result.best.tau));
    println!("lambda_loss = {}", g17(result.best.lambda_loss));
    println!("lr = {}", g17(result.best.lr));
    Ok(())
}

fn sim_cmd(
    common: &Common,
    files: &TreeFiles,
    ckpt_path: &Path,
    out: &Path,
    representations: Option<&Path>,
    raw: bool,
) -> Result<()> {
    let _ = training_config(common)?;
    let tree = load_tree(files)?;
    let ckpt = load_checkpoint(ckpt_path, &tree)?;
    let reps = compute_representations(&tree, &ckpt.model.hlr)?;
    if let Some(p) = representations {
        export::write_representations(p, &tree, &reps.h)?;
    }
    let sets: Vec<Vec<usize>> = tree.targets().iter().map(|id| vec![id.0]).collect();
    let clamp = if raw { ClampMode::Raw } else { ClampMode::NonNegative };
    let sim = pairwise_sim(&sets, &reps, clamp)?;
    export::write_square(out, &tree.target_codes(), &sim.values)?;
    let selected: usize = reps.selected_siblings.iter().map(Vec::len).sum();
    println!("targets = {}", tree.num_targets());
    println!("selected_siblings = {selected}");
    Ok(())
}

fn gradcheck_cmd(common: &Common, files: &TreeFiles, data_path: &Path, batch: usize, tolerance: f64) -> Result<()> {
    let (config, tree, ds) = load_inputs(common, files, data_path)?;
    if batch < 2 {
        bail!(Validation("--batch must be at least 2".into()));
    }
    let train_idx = ds.split(SplitName::Train);
    let vocab = text2tree_core::text_encoder::Vocabulary::build(
        train_idx.iter().map(|&i| ds.records[i].text.as_str()),
        config.min_freq,
    );
    let prepared = Prepared::new(&ds, &tree, &vocab, config.max_len)?;
    let model = Model::init(&tree, vocab.len(), &config)?;
    let indices: Vec<usize> = train_idx.iter().copied().take(batch).collect();
    let mut input = prepared.batch(&indices);
    input.sample_mixing(
        config.mode,
        &mut stream(config.seed, Stream::Pairing),
        &mut stream(config.seed, Stream::MixupWeights),
    )?;
    let options = GradCheckOptions {
        seed: config.seed,
        gate_mode: GateMode::Soft,
        ..Default::default()
    };
    let report = gradcheck::check(&model, &tree, &config, &input, &options)?;
    println!("loss = {}", g17(report.loss));
    for b in &report.blocks {
        println!("{}\t{}\t{}", b.name, b.checked, g17(b.max_rel_error));
    }
    let worst = report.max_rel_error();
    println!("max_rel_error = {}", g17(worst));
    if worst >= tolerance {
        bail!(Validation(format!("max relative error {worst:e} exceeds {tolerance:e}")));
    }
    Ok(())
}
