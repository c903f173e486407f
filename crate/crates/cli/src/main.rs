//! `difftok` command-line tool: corpus generation, training, fine-tuning,
//! encoding, decoding, evaluation and the oracle self-check.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use difftok_core::corpus::{generate_corpus, load_corpus, write_corpus, GeneratorConfig};
use difftok_core::formats::{
    load_checkpoint, read_tokens, save_checkpoint, write_smel, write_tokens,
};
use difftok_core::mel::{extract_mel, read_wav, stack_frames, unstack_frames};
use difftok_core::metrics::eval_reconstruction;
use difftok_core::model::{Model, ModelConfig, TokenSequence};
use difftok_core::selfcheck;
use difftok_core::train::{ctc_transcripts, label_accuracy, TrainConfig, Trainer, Utterance};
use difftok_core::Error;

#[derive(Parser, Debug)]
#[command(name = "difftok", version, about = "Diffusion speech tokenizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train encoder, quantizer, decoder and CTC head from scratch.
    Train(Common),
    /// Continue training the decoder only.
    FinetuneDecoder(Common),
    /// Teach the decoder step-size conditioning for few-step decoding.
    FinetuneShortcut(Common),
    /// Tokenize a WAV file or a corpus directory into a token file.
    Encode(Common),
    /// Reconstruct mel spectrograms from a token file.
    Decode(Common),
    /// Encode, decode and score a corpus directory.
    Eval(Common),
    /// Write a synthetic tone corpus.
    GenCorpus(GenArgs),
    /// Run every oracle suite.
    Selfcheck(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON document with optional `model`, `train` and `corpus` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory, WAV file, or token file depending on the command.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling steps for decode/eval (default 16); training steps for
    /// train and fine-tuning.
    #[arg(long)]
    steps: Option<usize>,
    /// Token guidance scale.
    #[arg(long = "cfg-scale", default_value_t = 1.0)]
    cfg_scale: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["S", "B", "L", "XL", "desk"])]
    preset: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    corpus: Option<GeneratorConfig>,
}

const DEFAULT_SAMPLE_STEPS: usize = 16;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) | Failure::Check(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Numeric(_) => "numeric",
            Failure::Check(_) => "selfcheck",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NanLoss { .. } | Error::NonFinite { .. } => Failure::Numeric(msg),
            Error::Config(_) => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}

fn read_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn model_config(c: &Common, file: &ConfigFile) -> CliResult<ModelConfig> {
    match (&file.model, &c.preset) {
        (Some(_), Some(_)) => Err(Failure::Usage(
            "give either --preset or a model section in --config, not both".into(),
        )),
        (Some(m), None) => Ok(m.clone()),
        (None, p) => Ok(ModelConfig::preset(p.as_deref().unwrap_or("desk"))?),
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let f = Failure::Usage(single_line(&e.to_string()));
            report(&f);
            return ExitCode::from(f.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.code())
        }
    }
}

fn report(f: &Failure) {
    let line = serde_json::json!({ "error": f.kind(), "message": single_line(f.message()) });
    eprintln!("{line}");
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Train(c) => train(&c, Stage::Base),
        Cmd::FinetuneDecoder(c) => train(&c, Stage::Decoder),
        Cmd::FinetuneShortcut(c) => train(&c, Stage::Shortcut),
        Cmd::Encode(c) => encode(&c),
        Cmd::Decode(c) => decode(&c),
        Cmd::Eval(c) => eval(&c),
        Cmd::GenCorpus(g) => gen_corpus(&g),
        Cmd::Selfcheck(c) => run_selfcheck(&c),
    }
}

fn gen_corpus(g: &GenArgs) -> CliResult<()> {
    let file = read_config(g.config.as_deref())?;
    let mut cfg = file.corpus.unwrap_or_default();
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg, g.count);
    let manifest = write_corpus(&g.out, &corpus, cfg.sample_rate)?;
    println!(
        "wrote {} utterances to {}",
        corpus.len(),
        manifest.display()
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Base,
    Decoder,
    Shortcut,
}

fn train(c: &Common, stage: Stage) -> CliResult<()> {
    let file = read_config(c.config.as_deref())?;
    let data_dir = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    if stage != Stage::Base && c.ckpt.is_none() {
        return Err(Failure::Usage("fine-tuning needs --ckpt".into()));
    }

    let (model, mut tcfg, start, opt) = match &c.ckpt {
        Some(p) => {
            let ck = load_checkpoint::<f32>(p)?;
            if let Some(m) = &file.model {
                if *m != ck.model.config {
                    return Err(Failure::Data(format!(
                        "checkpoint {} was trained with a different model config",
                        p.display()
                    )));
                }
            }
            let saved = ck.train.clone();
            let tcfg = file
                .train
                .clone()
                .or(saved)
                .unwrap_or_else(TrainConfig::desk);
            match stage {
                Stage::Base => (ck.model, tcfg, ck.step, ck.opt),
                Stage::Decoder => (ck.model, tcfg.finetune_decoder(), 0, None),
                Stage::Shortcut => (ck.model, tcfg.finetune_shortcut(), 0, None),
            }
        }
        None => {
            let mcfg = model_config(c, &file)?;
            let tcfg = file.train.clone().unwrap_or_else(|| {
                if mcfg == ModelConfig::preset("desk").expect("desk preset") {
                    TrainConfig::desk()
                } else {
                    TrainConfig::default()
                }
            });
            let seed = c.seed.unwrap_or(tcfg.seed);
            (Model::<f32>::new(mcfg, seed)?, tcfg, 0, None)
        }
    };
    if let Some(s) = c.seed {
        tcfg.seed = s;
    }
    if let Some(n) = c.steps {
        tcfg.steps = n;
    }
    let data = load_corpus(data_dir, &model.config.mel, model.config.vocab_size)?;

    let mut trainer = Trainer::new(model, tcfg.clone())?;
    if let Some(opt) = opt {
        trainer = trainer.with_state(start, opt)?;
    }
    let metrics_path = out.with_extension("metrics.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    let every = tcfg.checkpoint_every;
    let until = tcfg.steps;
    let result = trainer.run(&data, until, |t, r| {
        writeln!(metrics, "{}", serde_json::to_string(r)?)?;
        if every > 0 && (r.step + 1) % every == 0 {
            save_checkpoint(out, &t.model, Some(&t.config), t.step, Some(&t.opt))?;
        }
        Ok(())
    });
    metrics.flush()?;
    result?;
    save_checkpoint(
        out,
        &trainer.model,
        Some(&trainer.config),
        trainer.step,
        Some(&trainer.opt),
    )?;
    println!(
        "trained to step {}; checkpoint {}; metrics {}",
        trainer.step,
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn load_model(c: &Common) -> CliResult<Model<f32>> {
    let p = required(&c.ckpt, "ckpt")?;
    let ck = load_checkpoint::<f32>(p)?;
    let file = read_config(c.config.as_deref())?;
    if let Some(m) = file.model {
        if m != ck.model.config {
            return Err(Failure::Data(format!(
                "config model section does not match checkpoint {}",
                p.display()
            )));
        }
    }
    Ok(ck.model)
}

/// Utterances from a corpus directory or a single WAV file.
fn load_inputs(path: &Path, model: &Model<f32>) -> CliResult<Vec<Utterance>> {
    let mel_cfg = &model.config.mel;
    if path.is_dir() {
        return Ok(load_corpus(path, mel_cfg, model.config.vocab_size)?);
    }
    let wav = read_wav(path, mel_cfg.sample_rate)?;
    let mel = stack_frames(&extract_mel(&wav, mel_cfg)?, mel_cfg.stack)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "utt".into());
    Ok(vec![Utterance {
        id,
        mel,
        labels: Vec::new(),
    }])
}

fn encode(c: &Common) -> CliResult<()> {
    let model = load_model(c)?;
    let input = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    let seqs: Vec<TokenSequence> = load_inputs(input, &model)?
        .iter()
        .map(|u| model.encode(&u.id, &u.mel))
        .collect::<Result<_, _>>()?;
    write_tokens(out, &seqs)?;
    println!("encoded {} utterances to {}", seqs.len(), out.display());
    Ok(())
}

fn decode(c: &Common) -> CliResult<()> {
    let model = load_model(c)?;
    let tokens = read_tokens(required(&c.data, "data")?)?;
    let out = required(&c.out, "out")?;
    let steps = c.steps.unwrap_or(DEFAULT_SAMPLE_STEPS);
    let seed = c.seed.unwrap_or(0);
    let single_file = out.extension().is_some_and(|e| e == "smel");
    if single_file && tokens.len() != 1 {
        return Err(Failure::Usage(format!(
            "{} holds {} sequences; pass a directory as --out",
            out.display(),
            tokens.len()
        )));
    }
    if !single_file {
        fs::create_dir_all(out)?;
    }
    for seq in &tokens {
        let (mel, _) = model.decode(seq, steps, c.cfg_scale, seed)?;
        let mel = unstack_frames(&mel, model.config.mel.n_mels)?;
        let path = if single_file {
            out.to_path_buf()
        } else {
            out.join(format!("{}.smel", seq.id))
        };
        write_smel(&path, &mel)?;
    }
    println!("decoded {} sequences to {}", tokens.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    steps: usize,
    cfg_scale: f64,
    mel_l1: f64,
    mel_cosine: f64,
    ctc_exact: usize,
    ctc_label_accuracy: f64,
    utterances: Vec<difftok_core::metrics::UtteranceMetrics>,
}

fn eval(c: &Common) -> CliResult<()> {
    let model = load_model(c)?;
    let data = load_inputs(required(&c.data, "data")?, &model)?;
    let steps = c.steps.unwrap_or(DEFAULT_SAMPLE_STEPS);
    let seed = c.seed.unwrap_or(0);
    let n_mels = model.config.mel.n_mels;
    let mut pairs = Vec::with_capacity(data.len());
    for u in &data {
        let tokens = model.encode(&u.id, &u.mel)?;
        let (hyp, _) = model.decode(&tokens, steps, c.cfg_scale, seed)?;
        let hyp = unstack_frames(&hyp, n_mels)?;
        let reference = unstack_frames(&u.mel, n_mels)?;
        // Compare over the frames both sides cover.
        let rows = hyp.rows.min(reference.rows);
        let trim = |m: &difftok_core::mel::MelSpectrogram| difftok_core::mel::MelSpectrogram {
            data: m.data[..rows * n_mels].to_vec(),
            rows,
            valid_len: m.valid_len.min(rows),
            ..m.clone()
        };
        pairs.push((u.id.clone(), trim(&reference), trim(&hyp)));
    }
    let rec = eval_reconstruction(&pairs)?;
    let hyps = ctc_transcripts(&model, &data)?;
    let refs: Vec<Vec<usize>> = data.iter().map(|u| u.labels.clone()).collect();
    let (exact, acc) = label_accuracy(&hyps, &refs);
    let report = EvalReport {
        steps,
        cfg_scale: c.cfg_scale,
        mel_l1: rec.mel_l1,
        mel_cosine: rec.mel_cosine,
        ctc_exact: exact,
        ctc_label_accuracy: acc,
        utterances: rec.utterances,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
    match &c.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_selfcheck(c: &Common) -> CliResult<()> {
    let reports = selfcheck::run_all(c.seed.unwrap_or(0));
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{} {:<10} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    println!(
        "{}/{} suites passed",
        reports.len() - failed.len(),
        reports.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "failed suites: {}",
            failed.join(", ")
        )))
    }
}
