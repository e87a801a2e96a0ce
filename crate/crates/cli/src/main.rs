use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use paag::config::{Mode, RunConfig};
use paag::data::{build_vocab, encode_all, generate_synthetic, read_jsonl, split_train_test, write_jsonl, RawExample};
use paag::eval::evaluate;
use paag::metrics::paired_t_test;
use paag::model::{Model, Variant};
use paag::numerics::Checkpoint;
use serde_json::json;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Product-aware answer generation.
#[derive(Parser)]
#[command(name = "paag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write per-epoch checkpoints and loss curves.
    Train(Common),
    /// Score a checkpoint and the extractive baselines on a test set.
    Eval(Common),
    /// Write beam-search answers with gate traces as JSONL.
    Generate(Common),
    /// Write a synthetic train/test corpus.
    SynthData(Common),
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// RAGF, RAGFD, RAGFWD or PAAG.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    critic_iters: Option<usize>,
    #[arg(long)]
    attend_review_words: bool,
    #[arg(long)]
    per_step_critic: bool,
}

impl Common {
    fn resolve(&self, mode: Mode) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                RunConfig::parse(&text).with_context(|| format!("in config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.mode = mode;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(b) = self.beam {
            cfg.beam = b;
        }
        if let Some(k) = self.critic_iters {
            cfg.critic_iters = k;
        }
        cfg.attend_review_words |= self.attend_review_words;
        cfg.per_step_critic |= self.per_step_critic;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_dataset(path: Option<&Path>, key: &str) -> Result<Vec<RawExample>> {
    let Some(path) = path else {
        bail!("config key `{key}` is required for this command");
    };
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let data = read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(data)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(Model, paag::data::Vocabulary)> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
    let file = File::open(&path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let ck = Checkpoint::read_from(BufReader::new(file)).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Model::from_checkpoint(&ck).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let raws = read_dataset(cfg.train_path.as_deref(), "train_path")?;
    let vocab = build_vocab(&raws, cfg.vocab_size)?;
    let (examples, stats) = encode_all(&raws, &vocab)?;
    log::info!("{} examples, vocabulary {} words, {:?}", examples.len(), vocab.len(), stats);
    let (_, summary) = paag::train::train(cfg, &examples, &vocab, Some(&cfg.output_dir))?;
    if let Some(p) = &summary.final_checkpoint {
        println!("trained {} epochs ({} steps), final loss_g {:.4}; checkpoint {}", summary.epochs, summary.steps, summary.epoch_loss.last().copied().unwrap_or(f64::NAN), p.display());
    }
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let (model, vocab) = load_checkpoint(cfg)?;
    let raws = read_dataset(cfg.test_path.as_deref(), "test_path")?;
    let (report, records) = evaluate(&model, &vocab, &raws, cfg.beam, cfg.max_len)?;
    let vs_bm25 = paired_t_test(&report.model.per_example_bleu1, &report.bm25.per_example_bleu1).ok();
    let out = json!({ "variant": model.options.variant, "report": report, "paired_t_test_bleu1_vs_bm25": vs_bm25 });
    let path = cfg.output_dir.join("report.json");
    write_file(&path, serde_json::to_string_pretty(&out)?.as_bytes())?;

    let mut csv = String::from("index,model_bleu1,bm25_bleu1,tfidf_bleu1,generated,reference\n");
    for (i, r) in records.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},\"{}\",\"{}\"\n",
            report.model.per_example_bleu1[i],
            report.bm25.per_example_bleu1[i],
            report.tfidf.per_example_bleu1[i],
            r.generated.replace('"', "\"\""),
            r.reference.replace('"', "\"\"")
        ));
    }
    write_file(&cfg.output_dir.join("per_example.csv"), csv.as_bytes())?;
    println!(
        "BLEU {:.4} BLEU1 {:.4} (BM25 {:.4}, TF-IDF {:.4}) on {} examples; report {}",
        report.model.bleu.bleu, report.model.bleu.bleu1, report.bm25.bleu.bleu1, report.tfidf.bleu.bleu1, report.examples, path.display()
    );
    Ok(())
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let (model, vocab) = load_checkpoint(cfg)?;
    let raws = read_dataset(cfg.test_path.as_deref(), "test_path")?;
    let examples = paag::eval::encode_for_checkpoint(&raws, &vocab)?;
    let traces = paag::eval::generate_traces(&model, &examples, cfg.beam, cfg.max_len)?;
    let records = paag::eval::generation_records(&raws, &examples, &traces, &vocab);
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let path = cfg.output_dir.join("generations.jsonl");
    write_file(&path, text.as_bytes())?;
    println!("{} answers written to {}", records.len(), path.display());
    Ok(())
}

fn synth_data(cfg: &RunConfig) -> Result<()> {
    let corpus = generate_synthetic(&cfg.synth, cfg.seed)?;
    let (train, test) = split_train_test(&corpus.examples, cfg.synth_train_fraction, cfg.seed);
    let train_path = cfg.train_path.clone().unwrap_or_else(|| cfg.output_dir.join("train.jsonl"));
    let test_path = cfg.test_path.clone().unwrap_or_else(|| cfg.output_dir.join("test.jsonl"));
    for (path, part) in [(&train_path, &train), (&test_path, &test)] {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, part)?;
        write_file(path, &buf)?;
    }
    println!("{} train and {} test records: {}, {}", train.len(), test.len(), train_path.display(), test_path.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let start = std::time::Instant::now();
    let report = paag::gradcheck::run(cfg.seed)?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    write!(out, "{}", report.render())?;
    writeln!(out, "elapsed {:.1}s", start.elapsed().as_secs_f64())?;
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PAAG_LOG", "info")).init();
    let cli = Cli::parse();
    let run = || -> Result<bool> {
        match &cli.command {
            Command::Train(c) => train(&c.resolve(Mode::Train)?).map(|_| true),
            Command::Eval(c) => eval(&c.resolve(Mode::Eval)?).map(|_| true),
            Command::Generate(c) => generate(&c.resolve(Mode::Generate)?).map(|_| true),
            Command::SynthData(c) => synth_data(&c.resolve(Mode::SynthData)?).map(|_| true),
            Command::Gradcheck(c) => gradcheck(&c.resolve(Mode::Gradcheck)?),
        }
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
