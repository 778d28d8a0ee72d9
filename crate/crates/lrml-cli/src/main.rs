//! `lrml`: prepare, train, evaluate, and analyze collaborative-ranking
//! models from plain-text interaction logs.
//!
//! Exit codes: 0 success, 1 internal error, 2 user/config error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::SeedableRng;

use lrml::analysis::{self, PairAttribute};
use lrml::data::{
    build_dataset_with_keys, leave_one_out_split, load_events, EventFormat, SplitDataset,
};
use lrml::error::Error;
use lrml::eval::{self, EvalSplit, MetricsReport};
use lrml::model::{ModelKind, ModelParams};
use lrml::optim::{EpochRow, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "lrml",
    version,
    about = "Latent relational metric learning for implicit collaborative ranking"
)]
struct Cli {
    /// Worker threads for evaluation/analysis (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a rating log, binarize, filter, split leave-one-out, and
    /// snapshot the split.
    Prepare(PrepareArgs),
    /// Train a model on a prepared split, checkpointing as it goes.
    Train(TrainArgs),
    /// Rank the held-out items of a split under a checkpoint.
    Evaluate(EvaluateArgs),
    /// Attention, relation-similarity, and ill-posedness analyses.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tab,
    Doublecolon,
}

impl From<FormatArg> for EventFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tab => EventFormat::UirtTab,
            FormatArg::Doublecolon => EventFormat::UirtDoubleColon,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lrml,
    Cml,
    Bpr,
    Mf,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Lrml => ModelKind::Lrml,
            ModelArg::Cml => ModelKind::Cml,
            ModelArg::Bpr => ModelKind::Bpr,
            ModelArg::Mf => ModelKind::Mf,
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction log: user<sep>item[<sep>rating[<sep>timestamp]].
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "tab")]
    format: FormatArg,
    /// Drop users with fewer distinct interactions than this.
    #[arg(long, default_value_t = 20)]
    min_interactions: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for split.bin, stats.json, and the key maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Split snapshot from `prepare`.
    #[arg(long)]
    split: PathBuf,
    /// TrainConfig JSON; CLI flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    memory_slices: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory: resolved config, log.csv, checkpoints, best.params.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this run directory's state.bin.
    #[arg(long, default_value_t = false)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Dev,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    which: WhichArg,
    /// Write the JSON report here (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-user rank CSV.
    #[arg(long)]
    per_user: Option<PathBuf>,
    /// Dataset name recorded in the report.
    #[arg(long, default_value = "unknown")]
    dataset: String,
    /// Score the held-out item 1 and every negative 0; sanity oracle.
    #[arg(long, default_value_t = false, hide = true)]
    debug_oracle: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the analysis CSVs and summary JSON.
    #[arg(long)]
    out: PathBuf,
    /// User attribute TSV (user_key<TAB>attr_name<TAB>value), repeatable.
    #[arg(long)]
    user_attrs: Vec<PathBuf>,
    /// Item attribute TSV (item_key<TAB>attr_name<TAB>value), repeatable.
    #[arg(long)]
    item_attrs: Vec<PathBuf>,
    /// Attribute conjunctions as "attrA+attrB", repeatable.
    #[arg(long)]
    conjunction: Vec<String>,
    /// Directory holding user_keys.txt / item_keys.txt (defaults to the
    /// split's directory).
    #[arg(long)]
    keys_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    time_bins: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers != 1 {
        let threads = if cli.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            cli.workers
        };
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for anything the user can fix (paths, formats, config values, data
/// shape), 1 for internal numeric failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFiniteGradient { .. }
        | Error::NonFiniteScore { .. }
        | Error::IndexOutOfRange(_) => 1,
        _ => 2,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("JSON encode: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

// --- prepare ----------------------------------------------------------------

#[derive(serde::Serialize)]
struct PrepareStats {
    input: String,
    format: String,
    min_interactions: usize,
    split_seed: u64,
    num_users: usize,
    num_items: usize,
    interactions: usize,
    density: f64,
    ill_posedness_ratio: f64,
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&args.out)?;
    let format: EventFormat = args.format.into();
    let events = load_events(&args.input, format)?;
    let (ds, keys) = build_dataset_with_keys(&events, args.min_interactions)?;
    let split = leave_one_out_split(&ds, args.seed)?;

    split.save(&args.out.join("split.bin"))?;
    std::fs::write(
        args.out.join("user_keys.txt"),
        keys.user_keys.join("\n") + "\n",
    )?;
    std::fs::write(
        args.out.join("item_keys.txt"),
        keys.item_keys.join("\n") + "\n",
    )?;

    let stats = PrepareStats {
        input: args.input.display().to_string(),
        format: match format {
            EventFormat::UirtTab => "tab".into(),
            EventFormat::UirtDoubleColon => "doublecolon".into(),
        },
        min_interactions: args.min_interactions,
        split_seed: args.seed,
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        interactions: ds.num_interactions(),
        density: ds.density(),
        ill_posedness_ratio: analysis::ill_posedness_ratio(&ds, 1),
    };
    write_json(&args.out.join("stats.json"), &stats)?;
    println!(
        "prepared {} users x {} items, {} interactions (density {:.4}) -> {}",
        stats.num_users,
        stats.num_items,
        stats.interactions,
        stats.density,
        args.out.display()
    );
    Ok(())
}

// --- train ------------------------------------------------------------------

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::FileOpen {
                path: path.display().to_string(),
                source,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(model) = args.model {
        config.model_kind = model.into();
    }
    if let Some(dim) = args.dim {
        config.dim = dim;
    }
    if let Some(n) = args.memory_slices {
        config.memory_slices = n;
    }
    if let Some(margin) = args.margin {
        config.margin = margin;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(b) = args.batches {
        config.num_batches = b;
    }
    if let Some(e) = args.max_epochs {
        config.max_epochs = e;
    }
    if let Some(p) = args.patience {
        config.patience_epochs = p;
    }
    if let Some(c) = args.checkpoint_every {
        config.checkpoint_every = c;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn write_log_csv(path: &Path, log: &[EpochRow]) -> Result<(), Error> {
    let mut text = String::from(EpochRow::CSV_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    // Validate the configuration before touching any data.
    let fresh_config = if args.resume {
        None
    } else {
        Some(resolve_train_config(&args)?)
    };
    std::fs::create_dir_all(&args.out)?;
    let split = SplitDataset::load(&args.split)?;
    let state_path = args.out.join("state.bin");

    let mut trainer = if args.resume {
        let file = std::fs::File::open(&state_path).map_err(|source| Error::FileOpen {
            path: state_path.display().to_string(),
            source,
        })?;
        let mut trainer = Trainer::load_state(&mut std::io::BufReader::new(file), &split)?;
        // Budget flags may extend a resumed run; shape/seed flags cannot.
        trainer.extend_budget(args.max_epochs, args.patience, args.checkpoint_every);
        if args.model.is_some() || args.dim.is_some() || args.seed.is_some() {
            eprintln!("warning: --model/--dim/--seed are ignored on --resume");
        }
        eprintln!(
            "resuming {} at epoch {}",
            trainer.config().model_kind,
            trainer.epochs_done()
        );
        trainer
    } else {
        let config = fresh_config.expect("resolved above");
        write_json(&args.out.join("config.json"), &config)?;
        Trainer::new(&split, config)?
    };

    let checkpoint_every = trainer.config().checkpoint_every;
    while !trainer.finished() {
        let row = trainer.run_epoch(&split)?;
        eprintln!(
            "epoch {:>4}  loss {:.6}  dev HR@10 {:.4}  dev nDCG@10 {:.4}  ({:.1}s)",
            row.epoch, row.mean_loss, row.dev_hr10, row.dev_ndcg10, row.wall_seconds
        );
        let epoch = trainer.epochs_done();
        if (epoch as usize).is_multiple_of(checkpoint_every) || trainer.finished() {
            trainer
                .params()
                .save(&args.out.join(format!("checkpoint_epoch_{epoch}.params")))?;
            let mut state = std::io::BufWriter::new(std::fs::File::create(&state_path)?);
            trainer.save_state(&mut state)?;
            write_log_csv(&args.out.join("log.csv"), trainer.log())?;
        }
    }
    write_log_csv(&args.out.join("log.csv"), trainer.log())?;
    let best_epoch = trainer.best_epoch();
    trainer.best_params().save(&args.out.join("best.params"))?;
    {
        let mut state = std::io::BufWriter::new(std::fs::File::create(&state_path)?);
        trainer.save_state(&mut state)?;
    }
    println!(
        "trained {} for {} epochs; best dev nDCG@10 {:.4} at epoch {best_epoch}; best checkpoint {}",
        trainer.config().model_kind,
        trainer.epochs_done(),
        trainer.log()[best_epoch as usize - 1].dev_ndcg10,
        args.out.join("best.params").display()
    );
    Ok(())
}

// --- evaluate -----------------------------------------------------------------

fn oracle_report(split: &SplitDataset) -> MetricsReport {
    let per_user = (0..split.num_users())
        .map(|u| {
            let mut scores = vec![0.0; split.eval_negatives[u].len() + 1];
            scores[0] = 1.0;
            let rank = eval::rank_among(&scores, 0).unwrap();
            eval::RankResult {
                user: u as u32,
                rank,
                hit10: rank <= eval::CUTOFF,
                ndcg10: eval::ndcg_at_10(rank),
            }
        })
        .collect();
    eval::aggregate(per_user)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let split = SplitDataset::load(&args.split)?;
    let params = ModelParams::load(&args.checkpoint)?;
    let which = match args.which {
        WhichArg::Dev => EvalSplit::Dev,
        WhichArg::Test => EvalSplit::Test,
    };
    let report = if args.debug_oracle {
        oracle_report(&split)
    } else {
        eval::evaluate(&split, &params, which)?
    };

    let digest = lrml::fnv1a_hex(
        format!(
            "{}:{}:{}:{}",
            params.kind(),
            params.dim(),
            params.num_slices(),
            args.checkpoint.display()
        )
        .as_bytes(),
    );
    let json = report.to_json(params.kind().as_str(), &args.dataset, &digest);
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| Error::InvalidConfig(format!("JSON encode: {e}")))?;
    println!("{text}");
    if let Some(path) = &args.out {
        std::fs::write(path, text + "\n")?;
    }
    if let Some(path) = &args.per_user {
        std::fs::write(path, report.per_user_csv())?;
    }
    Ok(())
}

// --- analyze ------------------------------------------------------------------

#[derive(serde::Serialize)]
struct AnalyzeSummary {
    model: String,
    ran: Vec<String>,
    skipped: Vec<String>,
    dropped_classes: HashMap<String, Vec<String>>,
    excluded_pairs: usize,
    ill_posedness_ratio: f64,
}

fn load_attr_tables(
    paths: &[PathBuf],
    key_to_index: &HashMap<String, u32>,
) -> Result<HashMap<String, HashMap<u32, String>>, Error> {
    let mut tables: HashMap<String, HashMap<u32, String>> = HashMap::new();
    for path in paths {
        let text = std::fs::read_to_string(path).map_err(|source| Error::FileOpen {
            path: path.display().to_string(),
            source,
        })?;
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::MalformedLine {
                    path: path.display().to_string(),
                    line: line_no + 1,
                    reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            if let Some(&idx) = key_to_index.get(fields[0]) {
                tables
                    .entry(fields[1].to_string())
                    .or_default()
                    .insert(idx, fields[2].to_string());
            }
        }
    }
    Ok(tables)
}

fn load_keys(path: &Path) -> Result<HashMap<String, u32>, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::FileOpen {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, k)| (k.to_string(), i as u32))
        .collect())
}

fn rating_label(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&args.out)?;
    let split = SplitDataset::load(&args.split)?;
    let params = ModelParams::load(&args.checkpoint)?;
    if params.num_users() != split.num_users() || params.num_items() != split.num_items() {
        return Err(Error::DimMismatch(format!(
            "checkpoint is {}x{} but split is {}x{}",
            params.num_users(),
            params.num_items(),
            split.num_users(),
            split.num_items()
        )));
    }

    let mut ran = Vec::new();
    let mut skipped = Vec::new();
    let mut dropped_classes = HashMap::new();
    let mut excluded_pairs = 0usize;
    let has_lram = params.kind().has_memory();

    // Attention by rating class.
    if !has_lram {
        skipped.push(format!(
            "attention_by_rating: {} has no memory module",
            params.kind()
        ));
    } else if !split.train.has_ratings() {
        skipped.push("attention_by_rating: split carries no ratings".into());
    } else {
        let pairs: Vec<(u32, u32, String)> = (0..split.num_users())
            .flat_map(|u| {
                let items = split.train.user_items(u);
                let ratings = split.train.ratings(u).unwrap();
                items
                    .iter()
                    .zip(ratings)
                    .map(move |(&i, &r)| (u as u32, i, rating_label(r)))
                    .collect::<Vec<_>>()
            })
            .collect();
        let profile = analysis::attention_by_class("rating", &pairs, None, &params)?;
        std::fs::write(args.out.join("attention_by_rating.csv"), profile.to_csv())?;
        if !profile.dropped.is_empty() {
            eprintln!(
                "warning: rating classes with no pairs: {:?}",
                profile.dropped
            );
            dropped_classes.insert("rating".to_string(), profile.dropped.clone());
        }
        ran.push("attention_by_rating".to_string());
    }

    // Attention by time bin.
    if !has_lram {
        skipped.push(format!(
            "attention_by_time: {} has no memory module",
            params.kind()
        ));
    } else if !split.train.has_timestamps() {
        skipped.push("attention_by_time: split carries no timestamps".into());
    } else {
        let mut pairs_ui = Vec::new();
        let mut stamps = Vec::new();
        for u in 0..split.num_users() {
            let items = split.train.user_items(u);
            let ts = split.train.timestamps(u).unwrap();
            for (&i, &t) in items.iter().zip(ts) {
                pairs_ui.push((u as u32, i));
                stamps.push(t);
            }
        }
        match analysis::bin_timestamps(&stamps, args.time_bins) {
            Ok(bins) => {
                let pairs: Vec<(u32, u32, String)> = pairs_ui
                    .iter()
                    .zip(&bins)
                    .map(|(&(u, i), &b)| (u, i, b.to_string()))
                    .collect();
                let declared: Vec<String> = (0..args.time_bins).map(|b| b.to_string()).collect();
                let profile =
                    analysis::attention_by_class("time_bin", &pairs, Some(&declared), &params)?;
                std::fs::write(args.out.join("attention_by_time.csv"), profile.to_csv())?;
                if !profile.dropped.is_empty() {
                    dropped_classes.insert("time_bin".to_string(), profile.dropped.clone());
                }
                ran.push("attention_by_time".to_string());
            }
            Err(e) => skipped.push(format!("attention_by_time: {e}")),
        }
    }

    // Relation-vector similarity matching over the test pairs.
    let have_attrs = !args.user_attrs.is_empty() || !args.item_attrs.is_empty();
    if !has_lram {
        skipped.push(format!(
            "relation_matches: {} has no relation vectors",
            params.kind()
        ));
    } else if !have_attrs {
        skipped.push("relation_matches: no attribute files given".into());
    } else {
        let keys_dir = args.keys_dir.clone().unwrap_or_else(|| {
            args.split
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        });
        let user_keys = load_keys(&keys_dir.join("user_keys.txt"))?;
        let item_keys = load_keys(&keys_dir.join("item_keys.txt"))?;
        let user_tables = load_attr_tables(&args.user_attrs, &user_keys)?;
        let item_tables = load_attr_tables(&args.item_attrs, &item_keys)?;

        let test_pairs: Vec<(u32, u32)> = (0..split.num_users())
            .map(|u| (u as u32, split.test_items[u]))
            .collect();
        let mut attributes = Vec::new();
        let mut names: Vec<&String> = user_tables.keys().collect();
        names.sort();
        for name in names {
            attributes.push(PairAttribute::from_user_table(
                name,
                &user_tables[name],
                &test_pairs,
            ));
        }
        let mut names: Vec<&String> = item_tables.keys().collect();
        names.sort();
        for name in names {
            attributes.push(PairAttribute::from_item_table(
                name,
                &item_tables[name],
                &test_pairs,
            ));
        }
        for spec in &args.conjunction {
            let Some((a, b)) = spec.split_once('+') else {
                return Err(Error::InvalidConfig(format!(
                    "conjunction {spec:?} must be \"attrA+attrB\""
                )));
            };
            let find = |n: &str| attributes.iter().find(|attr| attr.name == n).cloned();
            match (find(a), find(b)) {
                (Some(x), Some(y)) => attributes.push(PairAttribute::conjunction(&x, &y)),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "conjunction {spec:?} names an unknown attribute"
                    )))
                }
            }
        }

        let mut rng = StdRng::seed_from_u64(args.seed);
        let outcome =
            analysis::relation_similarity_matches(&test_pairs, &attributes, &params, &mut rng)?;
        excluded_pairs = outcome.excluded_pairs;
        if excluded_pairs > 0 {
            eprintln!("warning: {excluded_pairs} pairs excluded for zero-norm relation vectors");
        }
        std::fs::write(
            args.out.join("relation_matches.csv"),
            analysis::match_reports_csv(&outcome.reports),
        )?;
        ran.push("relation_matches".to_string());
    }

    // The ill-posedness diagnostic runs for every model kind.
    let ratio = analysis::ill_posedness_ratio(&split.train, params.dim());
    ran.push("ill_posedness".to_string());

    let summary = AnalyzeSummary {
        model: params.kind().to_string(),
        ran: ran.clone(),
        skipped: skipped.clone(),
        dropped_classes,
        excluded_pairs,
        ill_posedness_ratio: ratio,
    };
    write_json(&args.out.join("analysis.json"), &summary)?;
    for s in &skipped {
        eprintln!("skipped: {s}");
    }
    println!(
        "analyses run: {} (skipped {}); outputs in {}",
        ran.join(", "),
        skipped.len(),
        args.out.display()
    );
    Ok(())
}
