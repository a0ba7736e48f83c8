//! The `emoctx` command line.
//!
//! Exit status is 0 on success, 1 when the run fails on its inputs (missing
//! file, malformed corpus, diverged training) and 2 when the arguments do not
//! parse. Every source of randomness is seeded from `--seed`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::corpus::{
    generate_synthetic, label_distribution, parse_conversations, serialize_conversations, Conversation, EmotionLabel,
    LabelDist, SyntheticSpec,
};
use crate::embed::{load_word_vectors, WordTable};
use crate::error::{Error, Result};
use crate::inference::{format_predictions, majority_vote, parse_predictions, predict};
use crate::metrics::{confusion, ScoreReport};
use crate::models::{read_checkpoint, write_checkpoint, ModelConfig, ModelKind, Profile};
use crate::textprep::{preprocess_corpus, EmojiAliasTable};
use crate::train::{class_weights, cross_validate, CvSetup, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "emoctx", version, about = "Emotion detection for three-turn conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize the three turn columns of a conversation file.
    Preprocess(PreprocessArgs),
    /// Write a synthetic labelled corpus.
    Synth(SynthArgs),
    /// k-fold training; writes fold_<r>.ckpt files and report.jsonl.
    Train(TrainArgs),
    /// Predict a conversation file with one checkpoint.
    Predict(PredictArgs),
    /// Majority-vote several prediction files.
    Vote(VoteArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Print importance weights for a corpus or a label distribution.
    Weights(WeightsArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Conversation TSV, with or without a label column.
    #[arg(long)]
    data: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    /// Label mix, e.g. `happy=0.14,angry=0.18,sad=0.18,others=0.5`, or `uniform`.
    #[arg(long, default_value = "uniform")]
    dist: String,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that both context turns carry a cue of the label.
    #[arg(long, default_value_t = 0.8)]
    context_cue_rate: f64,
    /// Share of `others` examples whose last turn carries an emotion cue.
    #[arg(long, default_value_t = 0.0)]
    others_cue_rate: f64,
    /// Drop the random filler words so identical examples repeat exactly.
    #[arg(long)]
    no_fillers: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long, default_value = "desk", value_parser = parse_profile)]
    profile: Profile,
    /// Labelled conversation TSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Test-time label mix for importance weighting, or `none` to train unweighted.
    #[arg(long)]
    target: Option<String>,
    /// Word vectors, one `token v1 .. vd` per line.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// JSON file with optional `model` and `train` objects layered over the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Conversation TSV; a label column is allowed and ignored.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VoteArgs {
    /// Prediction file; repeat once per voter.
    #[arg(long = "pred", required = true)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Gold file; the label is its last column (conversation or prediction layout).
    #[arg(long)]
    gold: PathBuf,
    /// Print the score report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    /// Labelled corpus whose label mix is the training distribution.
    #[arg(long, conflicts_with = "train_dist", required_unless_present = "train_dist")]
    data: Option<PathBuf>,
    /// Training distribution given directly instead of a corpus.
    #[arg(long)]
    train_dist: Option<String>,
    #[arg(long, default_value = crate::train::DEFAULT_TARGET)]
    target: String,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run(args: &[String]) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Vote(a) => vote(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Weights(a) => weights(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::domain(format!("{}: no such file", path.display())))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

/// Conversations with or without a label column, decided by the first data row.
fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let text = read_text(path)?;
    let labelled = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .take(2)
        .any(|l| l.trim_end_matches('\r').split('\t').count() == 5);
    parse_conversations(&text, labelled).map_err(|e| Error::domain(format!("{}: {e}", path.display())))
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    require_file(&a.data)?;
    let convs = read_conversations(&a.data)?;
    let (out, unknown) = preprocess_corpus(&convs, EmojiAliasTable::bundled())?;
    if unknown > 0 {
        eprintln!("{unknown} unknown emoji dropped");
    }
    emit(a.out.as_deref(), &serialize_conversations(&out))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.n, LabelDist::parse_spec(&a.dist)?, a.vocab_size, a.seed);
    spec.context_cue_rate = a.context_cue_rate;
    spec.others_cue_rate = a.others_cue_rate;
    spec.fillers = !a.no_fillers;
    emit(a.out.as_deref(), &serialize_conversations(&generate_synthetic(&spec)?))
}

/// Recursively overlays `patch` on `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Profile defaults, then the config file, then flags.
fn resolve_configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = serde_json::to_value(ModelConfig::for_profile(a.profile)).expect("config serializes");
    let mut train = serde_json::to_value(TrainConfig::for_profile(a.profile)).expect("config serializes");
    if let Some(path) = &a.config {
        let text = read_text(path)?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::domain(format!("{}: {e}", path.display())))?;
        let Value::Object(mut sections) = file else {
            return Err(Error::domain(format!("{}: expected a JSON object", path.display())));
        };
        if let Some(m) = sections.remove("model") {
            merge(&mut model, m);
        }
        if let Some(t) = sections.remove("train") {
            merge(&mut train, t);
        }
        if let Some(key) = sections.keys().next() {
            return Err(Error::domain(format!(
                "{}: unknown section {key:?} (expected \"model\" or \"train\")",
                path.display()
            )));
        }
    }
    let model: ModelConfig = serde_json::from_value(model).map_err(|e| Error::domain(format!("model config: {e}")))?;
    let mut train: TrainConfig =
        serde_json::from_value(train).map_err(|e| Error::domain(format!("train config: {e}")))?;
    if let Some(t) = &a.target {
        train.target = (!t.eq_ignore_ascii_case("none")).then(|| t.clone());
    }
    if let Some(v) = a.epochs {
        train.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.lr {
        train.adam.lr = v;
    }
    if let Some(v) = a.patience {
        train.patience = v;
    }
    model.validate(a.model)?;
    train.validate()?;
    Ok((model, train))
}

fn train(a: TrainArgs) -> Result<()> {
    require_file(&a.data)?;
    for p in a.vectors.iter().chain(&a.config) {
        require_file(p)?;
    }
    let (model_config, train_config) = resolve_configs(&a)?;
    let convs = read_conversations(&a.data)?;
    let words = match &a.vectors {
        Some(p) => load_word_vectors(&read_text(p)?)?,
        None => WordTable::empty(0),
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let setup = CvSetup {
        kind: a.model,
        model: model_config,
        train: train_config,
        words: &words,
        k: a.k,
        seed: a.seed,
    };
    let cv = cross_validate(&convs, &setup, EmojiAliasTable::bundled())?;
    let mut written = 0;
    for (r, model) in cv.models.iter().enumerate() {
        if let Some(m) = model {
            write_checkpoint(&a.out.join(format!("fold_{r}.ckpt")), m)?;
            written += 1;
        }
    }
    let report_path = a.out.join("report.jsonl");
    fs::write(&report_path, cv.jsonl()).map_err(|e| Error::io(&report_path, e))?;
    for rep in &cv.reports {
        match (&rep.diverged, rep.best_score) {
            (Some(why), _) => println!("fold {}: diverged at {why}", rep.fold),
            (None, score) => println!(
                "fold {}: epoch {} held harmonic mean {:.4}",
                rep.fold,
                rep.chosen_epoch,
                score.unwrap_or(0.0)
            ),
        }
    }
    if written == 0 {
        return Err(Error::domain("every fold diverged; no checkpoint written"));
    }
    println!("{written} checkpoints in {}", a.out.display());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.data)?;
    let model = read_checkpoint(&a.model)?;
    let convs = read_conversations(&a.data)?;
    let preds = predict(&model, &convs, EmojiAliasTable::bundled())?;
    emit(a.out.as_deref(), &format_predictions(&preds))
}

fn read_predictions(path: &Path) -> Result<Vec<crate::inference::Prediction>> {
    parse_predictions(&read_text(path)?).map_err(|e| Error::domain(format!("{}: {e}", path.display())))
}

fn vote(a: VoteArgs) -> Result<()> {
    for p in &a.preds {
        require_file(p)?;
    }
    let voters = a
        .preds
        .iter()
        .map(|p| read_predictions(p))
        .collect::<Result<Vec<_>>>()?;
    emit(a.out.as_deref(), &format_predictions(&majority_vote(&voters)?))
}

/// `(id, label)` rows of any TSV whose last column is a label. A first row
/// whose last cell is not a label is a header.
fn read_gold(path: &Path) -> Result<Vec<(String, EmotionLabel)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        let last = cells[cells.len() - 1].trim();
        let label = last.parse::<EmotionLabel>();
        if std::mem::take(&mut first) && label.is_err() {
            continue;
        }
        if cells.len() != 5 && cells.len() != 6 {
            return Err(Error::domain(format!(
                "{}: line {}: expected 5 or 6 columns, found {}",
                path.display(),
                i + 1,
                cells.len()
            )));
        }
        let label = label.map_err(|e| Error::domain(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push((cells[0].trim().to_string(), label));
    }
    Ok(out)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_file(&a.pred)?;
    require_file(&a.gold)?;
    let preds: Vec<(String, EmotionLabel)> = read_predictions(&a.pred)?
        .into_iter()
        .map(|p| (p.id, p.label))
        .collect();
    let gold = read_gold(&a.gold)?;
    let report = ScoreReport::new(&confusion(&preds, &gold)?);
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{report}");
    }
    Ok(())
}

fn weights(a: WeightsArgs) -> Result<()> {
    let train = match (&a.data, &a.train_dist) {
        (Some(p), _) => {
            require_file(p)?;
            label_distribution(&read_conversations(p)?)?
        }
        (None, Some(spec)) => LabelDist::parse_spec(spec)?,
        (None, None) => unreachable!("clap requires one of --data and --train-dist"),
    };
    let target = LabelDist::parse_spec(&a.target)?;
    let w = class_weights(&train, &target)?;
    let out = json!({
        "train": train.to_json(),
        "target": target.to_json(),
        "weights": w.to_json(),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json serializes"));
    Ok(())
}
