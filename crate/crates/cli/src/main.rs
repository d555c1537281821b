//! `u2u-imn`: train, evaluate and inspect multi-turn response selection
//! models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use u2u_imn::config::RunConfig;
use u2u_imn::corpus::{parse_line, write_dataset, DialogueExample, LineFormat, Vocabulary};
use u2u_imn::export::export_attention;
use u2u_imn::model::{Model, Variant};
use u2u_imn::params::Checkpoint;
use u2u_imn::run::{self, Split};
use u2u_imn::synthetic::{generate_groups, ReplyRule, SyntheticConfig};
use u2u_imn::train::{score_examples, shape_all, LogRecord};
use u2u_imn::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "u2u-imn", version, about = "Multi-turn response selection with utterance-to-utterance matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Records,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReplyArg {
    Echo,
    Mapped,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, vocabulary and log to output.dir.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full", allow_hyphen_values = true)]
        variant: String,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank the candidates of a test set and report retrieval metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        variant: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write the ranked run (`ctx, cand, score, label` lines).
        #[arg(long)]
        run_file: Option<PathBuf>,
    },
    /// Score candidate responses for one context, best first.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        variant: Option<String>,
        /// Context utterances separated by `_eou_`.
        #[arg(long)]
        context: String,
        /// A candidate response; repeat for more.
        #[arg(long, required = true)]
        candidate: Vec<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Train and test model variants and print a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variants to run; all of them when omitted.
        #[arg(long = "variant", allow_hyphen_values = true)]
        variants: Vec<String>,
        /// Seeds per variant; the configured seed when omitted.
        #[arg(long = "seeds", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Where to keep one checkpoint per run.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Write attention weights and gate traces for one example.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        variant: Option<String>,
        /// The example as one dataset line.
        #[arg(long)]
        example: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic keyword corpus and a matching run configuration.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train_contexts: usize,
        #[arg(long, default_value_t = 200)]
        valid_contexts: usize,
        #[arg(long, default_value_t = 500)]
        test_contexts: usize,
        /// Candidates per context in the validation and test sets.
        #[arg(long, default_value_t = 10)]
        candidates: usize,
        /// Negatives per context in the training set.
        #[arg(long, default_value_t = 4)]
        negatives: usize,
        #[arg(long, value_enum, default_value = "echo")]
        reply: ReplyArg,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::ParamShape { .. } => 2,
        Error::NonFinite { .. } | Error::Tensor(_) => 4,
        Error::Parse { .. } | Error::Io { .. } | Error::Data(_) | Error::Checkpoint(_) => 3,
    }
}

fn usage(key: &str, msg: &str) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

fn overrides(mut cfg: RunConfig, seed: Option<u64>) -> Result<RunConfig> {
    cfg.apply_env(std::env::vars())?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn require_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| usage("--config", "this command needs a config file"))?;
    overrides(RunConfig::load(path)?, common.seed)
}

fn parse_variant(name: &str) -> Result<Variant> {
    name.parse()
}

/// A checkpoint with the config and model to run it under. The model
/// comes from `--config` (plus the variant) when given, otherwise from
/// the configuration stored in the checkpoint.
struct Loaded {
    cfg: RunConfig,
    model: Model,
    ck: Checkpoint,
    vocab: Vocabulary,
}

fn load_checkpoint(common: &Common, path: &Path, variant: Option<&str>) -> Result<Loaded> {
    let ck = Checkpoint::load(path)?;
    // The stored config already has the training variant applied.
    let (cfg, variant) = match &common.config {
        Some(p) => (RunConfig::load(p)?, variant.or(ck.meta.get("variant").map(String::as_str))),
        None => (RunConfig::parse(&ck.config_text)?, variant),
    };
    let cfg = overrides(cfg, common.seed)?;
    let model_cfg = match variant.map(parse_variant).transpose()? {
        Some(v) => v.apply(&cfg.model),
        None => cfg.model.clone(),
    };
    let model = Model::new(model_cfg)?;
    let vocab_path = cfg
        .data
        .vocab
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = Vocabulary::load(&vocab_path)?;
    run::check_params(&model, &vocab, &ck.params)?;
    Ok(Loaded { cfg, model, ck, vocab })
}

fn comment(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn cmd_train(common: &Common, variant: &str, resume: Option<&Path>) -> Result<()> {
    let cfg = require_config(common)?;
    let variant = parse_variant(variant)?;
    let data = run::load_split(&cfg, Split::Train)?;
    let valid = match cfg.data.valid {
        Some(_) => Some(run::load_split(&cfg, Split::Valid)?),
        None => None,
    };
    let vocab = run::vocabulary(&cfg, &data)?;
    let pretrained = run::pretrained(&cfg, &vocab)?;
    let resume = resume.map(Checkpoint::load).transpose()?;

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let run_cfg = run::variant_config(&cfg, variant);
    run::write_text(&out.join("config.conf"), &run_cfg.to_text())?;
    vocab.save(&out.join("vocab.txt"))?;
    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut write = |rec: &LogRecord| -> Result<()> {
        writeln!(log, "{}", rec.to_json()).map_err(|e| Error::io(&log_path, e))
    };
    write(&LogRecord::Config {
        text: run_cfg.to_text(),
    })?;

    let (_, outcome) = run::train_model(&cfg, variant, &vocab, pretrained, &data, valid.as_deref(), resume, &mut |rec| {
        match rec {
            LogRecord::Epoch { epoch, mean_loss, .. } => eprintln!("epoch {epoch:>3}  loss {mean_loss:.4}"),
            LogRecord::Eval { recall_at_1, best, .. } => {
                eprintln!("           valid R@1 {recall_at_1:.4}{}", if *best { "  (best)" } else { "" })
            }
            _ => {}
        }
        write(rec)
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);
    outcome.last.save(&out.join("last.ckpt"))?;
    outcome.best.save(&out.join("best.ckpt"))?;
    match outcome.best_recall {
        Some(r) => println!("best valid R@1 {r:.4}; checkpoints in {}", out.display()),
        None => println!("trained {} steps; checkpoints in {}", outcome.last.step, out.display()),
    }
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, variant: Option<&str>, format: Format, split: SplitArg, run_file: Option<&Path>) -> Result<()> {
    let l = load_checkpoint(common, checkpoint, variant)?;
    let split = match split {
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    let data = run::load_split(&l.cfg, split)?;
    let ranked = run::evaluate(&l.model, &l.ck.params, &l.vocab, &data, l.cfg.data.candidates)?;
    let report = ranked.report()?;
    if let Some(p) = run_file {
        run::write_text(p, &format!("{}{}", comment(&l.ck.config_text), ranked.to_text()))?;
    }
    match format {
        Format::Table => print!("{}", report.to_table()),
        Format::Records => print!("{}", report.to_records()),
    }
    Ok(())
}

fn cmd_score(common: &Common, checkpoint: &Path, variant: Option<&str>, context: &str, candidates: &[String], format: Format) -> Result<()> {
    let l = load_checkpoint(common, checkpoint, variant)?;
    let examples: Vec<DialogueExample> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| parse_line(&format!("0\t{context}\t{c}"), LineFormat::V2, i + 1))
        .collect::<Result<_>>()?;
    let shaped = shape_all(&l.model, &examples);
    let scores = score_examples(&l.model, &l.ck.params, &l.vocab, &shaped, 64)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut s = String::new();
    for (rank, &i) in order.iter().enumerate() {
        match format {
            Format::Table => {
                let _ = writeln!(s, "{:>3}  {:.6}  {}", rank + 1, scores[i], candidates[i]);
            }
            Format::Records => {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", rank + 1, i, scores[i], candidates[i]);
            }
        }
    }
    print!("{s}");
    Ok(())
}

fn cmd_ablate(common: &Common, variants: &[String], seeds: &[u64], checkpoint_dir: Option<&Path>, format: Format) -> Result<()> {
    let cfg = require_config(common)?;
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
    };
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let data = run::load_split(&cfg, Split::Train)?;
    let test = run::load_split(&cfg, Split::Test)?;
    let valid = match cfg.data.valid {
        Some(_) => Some(run::load_split(&cfg, Split::Valid)?),
        None => None,
    };
    let vocab = run::vocabulary(&cfg, &data)?;
    let pretrained = run::pretrained(&cfg, &vocab)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        vocab.save(&dir.join("vocab.txt"))?;
    }
    let rows = run::ablate(&cfg, &variants, &seeds, &vocab, pretrained.as_ref(), &data, valid.as_deref(), &test, &mut |v, seed, ck, r1| {
        eprintln!("{v:<10} seed {seed}  R{}@1 {r1:.4}", cfg.data.candidates);
        match checkpoint_dir {
            Some(dir) => ck.save(&dir.join(format!("{v}.seed{seed}.ckpt"))),
            None => Ok(()),
        }
    })?;
    let n = cfg.data.candidates;
    let text = match format {
        Format::Table => run::ablation_table(&rows, n),
        Format::Records => {
            let mut s = String::new();
            for r in &rows {
                for (seed, v) in &r.recall {
                    let _ = writeln!(s, "{}\t{seed}\tR{n}@1\t{v}", r.variant);
                }
            }
            s
        }
    };
    if let Some(dir) = checkpoint_dir {
        run::write_text(&dir.join("ablation.txt"), &format!("{}{text}", comment(&cfg.to_text())))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_export(common: &Common, checkpoint: &Path, variant: Option<&str>, example: &str, out: &Path) -> Result<()> {
    let l = load_checkpoint(common, checkpoint, variant)?;
    let ex = parse_line(example, l.cfg.data.format, 1)?;
    let x = export_attention(&l.model, &l.ck.params, &l.vocab, &ex)?;
    if x.c2r.is_none() && x.r2c.is_none() {
        eprintln!("this model has no global alignment weights; writing tokens and gates only");
    }
    for p in x.write_dir(out, &l.ck.config_text)? {
        println!("{}", p.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    out: &Path,
    seed: u64,
    train_contexts: usize,
    valid_contexts: usize,
    test_contexts: usize,
    candidates: usize,
    negatives: usize,
    reply: ReplyArg,
) -> Result<()> {
    if negatives == 0 {
        return Err(usage("--negatives", "need at least one negative per context"));
    }
    let syn = SyntheticConfig {
        reply: match reply {
            ReplyArg::Echo => ReplyRule::Echo,
            ReplyArg::Mapped => ReplyRule::Mapped,
        },
        ..SyntheticConfig::default()
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_dataset(&out.join("train.txt"), &generate_groups(&syn, train_contexts, negatives + 1, seed)?)?;
    write_dataset(&out.join("valid.txt"), &generate_groups(&syn, valid_contexts, candidates, seed + 1)?)?;
    write_dataset(&out.join("test.txt"), &generate_groups(&syn, test_contexts, candidates, seed + 2)?)?;
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.data.train = Some("train.txt".into());
    cfg.data.valid = Some("valid.txt".into());
    cfg.data.test = Some("test.txt".into());
    cfg.data.candidates = candidates;
    cfg.output_dir = "run".into();
    run::write_text(&out.join("run.conf"), &cfg.to_text())?;
    println!("{}", out.join("run.conf").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, variant, checkpoint } => cmd_train(&common, &variant, checkpoint.as_deref()),
        Command::Evaluate { common, checkpoint, variant, format, split, run_file } => {
            cmd_evaluate(&common, &checkpoint, variant.as_deref(), format, split, run_file.as_deref())
        }
        Command::Score { common, checkpoint, variant, context, candidate, format } => {
            cmd_score(&common, &checkpoint, variant.as_deref(), &context, &candidate, format)
        }
        Command::Ablate { common, variants, seeds, checkpoint_dir, format } => {
            cmd_ablate(&common, &variants, &seeds, checkpoint_dir.as_deref(), format)
        }
        Command::ExportAttention { common, checkpoint, variant, example, out } => {
            cmd_export(&common, &checkpoint, variant.as_deref(), &example, &out)
        }
        Command::Generate { out, seed, train_contexts, valid_contexts, test_contexts, candidates, negatives, reply } => {
            cmd_generate(&out, seed, train_contexts, valid_contexts, test_contexts, candidates, negatives, reply)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
