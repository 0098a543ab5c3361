use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distcap::distinct::{group_distinct_words, relatedness_weights, DistinctProfile};
use distcap::groups::{build_groups, EmbeddingKind, GroupSource, RetrievalMode};
use distcap::io;
use distcap::losses::{gradient_check, planted_task, train_toy, ToyConfig};
use distcap::metrics::{corpus_report, CiderScorer};
use distcap::{Error, Result};

const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "distcap", version, about = "Group-based distinctive image captioning tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Similar-image groups.
    #[command(subcommand)]
    Groups(GroupsCommand),
    /// Distinctive words and their relatedness weights per group target.
    Diswords(DiswordsArgs),
    /// Accuracy and distinctiveness report for one candidate per target.
    Eval(EvalArgs),
    /// Differential memory attention.
    #[command(subcommand)]
    Gdma(GdmaCommand),
    /// Train on the planted-distinctive toy task.
    TrainToy(TrainToyArgs),
    /// Compare analytic and finite-difference gradients on a random instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum GroupsCommand {
    /// Partition the dataset into groups of K+1 images.
    Build(GroupsBuildArgs),
}

#[derive(Args)]
struct GroupsBuildArgs {
    /// Image embeddings (DDEM).
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// Caption embeddings (DDEM, ids `<image>#<n>`), for caption-retrieval mode.
    #[arg(long)]
    caption_embeddings: Option<PathBuf>,
    #[arg(short = 'K', default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `image-image` or `caption-retrieval`.
    #[arg(long, default_value = "image-image", value_parser = parse_mode)]
    mode: RetrievalMode,
    #[arg(short)]
    o: PathBuf,
}

#[derive(Args)]
struct DiswordsArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    /// Sentence embeddings keyed by template sentence (DDEM).
    #[arg(long, requires = "img_emb")]
    sent_emb: Option<PathBuf>,
    /// Image embeddings in the sentence embedding space (DDEM).
    #[arg(long, requires = "sent_emb")]
    img_emb: Option<PathBuf>,
    #[arg(short)]
    o: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    /// Profiles written by `diswords`.
    #[arg(long)]
    diswords: Option<PathBuf>,
    #[arg(short)]
    o: PathBuf,
}

#[derive(Subcommand)]
enum GdmaCommand {
    /// Dump attention states for every group target.
    Run(GdmaRunArgs),
}

#[derive(Args)]
struct GdmaRunArgs {
    /// Region features (DDRF).
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(short)]
    o: PathBuf,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for `log.jsonl`, `checkpoint.ddrf` and `evaluation.json`.
    #[arg(short)]
    o: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_mode(s: &str) -> std::result::Result<RetrievalMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown mode `{s}` (expected image-image or caption-retrieval)"))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn groups_build(a: &GroupsBuildArgs) -> Result<()> {
    let dataset = io::read_captions(&a.captions)?;
    let images = io::read_embeddings(&a.embeddings, EmbeddingKind::Image)?;
    let captions = match &a.caption_embeddings {
        Some(p) => Some(io::read_embeddings(p, EmbeddingKind::Caption)?),
        None => None,
    };
    let source = GroupSource {
        images: &images,
        captions: captions.as_ref(),
    };
    let groups = build_groups(&source, &dataset, a.k, a.seed, a.mode)?;
    io::write_groups(&a.o, &groups)
}

fn diswords(a: &DiswordsArgs) -> Result<()> {
    let dataset = io::read_captions(&a.captions)?;
    let groups = io::read_groups(&a.groups)?;
    let embeddings = match (&a.sent_emb, &a.img_emb) {
        (Some(s), Some(i)) => Some((
            io::read_embeddings(s, EmbeddingKind::Image)?,
            io::read_embeddings(i, EmbeddingKind::Image)?,
        )),
        _ => None,
    };
    let mut profiles = Vec::with_capacity(groups.len());
    for group in &groups {
        let omega = group_distinct_words(group, &dataset)?;
        let profile = match &embeddings {
            Some((sentences, images)) => {
                let weights = relatedness_weights(&omega, sentences, images.vector(&group.target)?)?;
                DistinctProfile::with_weights(group.target.clone(), omega, weights)?
            }
            None => DistinctProfile::uniform(group.target.clone(), omega),
        };
        profiles.push(profile);
    }
    io::write_profiles(&a.o, &profiles)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let dataset = io::read_captions(&a.captions)?;
    let candidates = io::read_candidates(&a.candidates)?;
    let groups = io::read_groups(&a.groups)?;
    let omegas = match &a.diswords {
        Some(p) => io::profile_words(&io::read_profiles(p)?),
        None => Default::default(),
    };
    let scorer = CiderScorer::from_dataset(&dataset)?;
    let report = corpus_report(&scorer, &candidates, &dataset, &groups, &omegas)?;
    io::write_json(&a.o, &report)
}

fn gdma_run(a: &GdmaRunArgs) -> Result<()> {
    let features = io::read_region_features(&a.features)?;
    let groups = io::read_groups(&a.groups)?;
    let config: io::GdmaRunConfig = io::read_json(&a.params)?;
    let dump = io::gdma_dump(&features, &groups, &config)?;
    io::write_json(&a.o, &dump)
}

fn train(a: &TrainToyArgs) -> Result<()> {
    let config: ToyConfig = io::read_json(&a.config)?;
    config.validate()?;
    let task = planted_task(&config)?;
    let outcome = train_toy(&task, &config)?;
    fs::create_dir_all(&a.o).map_err(|e| io_error(&a.o, e))?;

    let log_path = a.o.join("log.jsonl");
    let mut log = String::new();
    for entry in &outcome.log {
        let line = serde_json::to_value(entry).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        log.push_str(&line.to_string());
        log.push('\n');
    }
    fs::write(&log_path, log).map_err(|e| io_error(&log_path, e))?;
    io::write_region_features(
        &a.o.join("checkpoint.ddrf"),
        &io::checkpoint_features(&outcome.state.params)?,
    )?;
    io::write_json(&a.o.join("evaluation.json"), &outcome.evaluation)?;

    let eval = &outcome.evaluation;
    println!(
        "steps {}  planted hits {}/{}  DisWordRate {}",
        outcome.state.step,
        eval.planted_hits,
        eval.captions.len(),
        eval.dis_word_rate.map_or("n/a".to_owned(), |r| format!("{r:.4}")),
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let rows = gradient_check(a.seed, GRADCHECK_STEP, GRADCHECK_TOLERANCE)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "seed {}  h {:e}  tolerance {:e}", a.seed, GRADCHECK_STEP, GRADCHECK_TOLERANCE);
    let _ = writeln!(out, "{:<22} {:>6} {:>14}  result", "block", "coords", "max rel err");
    for r in &rows {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        let _ = writeln!(out, "{:<22} {:>6} {:>14.3e}  {verdict}", r.block, r.coordinates, r.max_rel_error);
    }
    Ok(rows.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Groups(GroupsCommand::Build(a)) => groups_build(&a).map(|_| true),
        Command::Diswords(a) => diswords(&a).map(|_| true),
        Command::Eval(a) => eval(&a).map(|_| true),
        Command::Gdma(GdmaCommand::Run(a)) => gdma_run(&a).map(|_| true),
        Command::TrainToy(a) => train(&a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
