//! Command-line surface: corpus synthesis, training, generation, evaluation,
//! tracing, sensitivity probing and checkpoint inspection.
//!
//! Every subcommand accepts `--config <file>` with flat `key=value` lines
//! mirroring the long flag names (dashes become underscores). Explicit flags
//! override file values, and the effective configuration is echoed to
//! `effective.cfg` in the output directory so any run can be reproduced.

use crate::data::{self, Example, SupportLabel, SynthConfig, Vocabulary};
use crate::decoding::{self, DecodeConfig};
use crate::metrics;
use crate::model::{Checkpoint, Mode, Model, ModelConfig};
use crate::training::{self, ConfidenceParams, DropoutRates, LossTerms, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "confidec",
    version,
    about = "Confident decoding for data-to-text generation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic table-to-text corpus with controlled divergence.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Decode a corpus with beam search.
    Generate(GenerateArgs),
    /// Score predictions against references and tables.
    Evaluate(EvaluateArgs),
    /// Per-token confidence trace of one example's reference.
    Trace(TraceArgs),
    /// Source-zeroing sensitivity probe over p in {0, 0.1, ..., 0.5}.
    Probe(ProbeArgs),
    /// Summarize a checkpoint without mutating it.
    Inspect(InspectArgs),
}

/// Parse argv and run; returns the process exit code (0 success, 1 runtime
/// error, 2 usage error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Config-file values plus the record of every resolved setting.
struct Settings {
    file: HashMap<String, String>,
    effective: Vec<(String, String)>,
}

impl Settings {
    fn load(path: Option<&PathBuf>) -> Result<Self> {
        let mut file = HashMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key=value", p.display(), i + 1))?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Settings {
            file,
            effective: Vec::new(),
        })
    }

    /// Flag > config file > default; the chosen value is recorded.
    fn resolve<T>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(s) => s
                    .parse::<T>()
                    .map_err(|e| anyhow::anyhow!("config key {key}={s}: {e}"))?,
                None => default,
            },
        };
        self.effective.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Optional setting with no default; `none` in a file means absent.
    fn resolve_opt<T>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key).map(|s| s.as_str()) {
                None | Some("none") => None,
                Some(s) => Some(
                    s.parse::<T>()
                        .map_err(|e| anyhow::anyhow!("config key {key}={s}: {e}"))?,
                ),
            },
        };
        self.effective.push((
            key.to_string(),
            value
                .as_ref()
                .map_or_else(|| "none".to_string(), |v| v.to_string()),
        ));
        Ok(value)
    }

    /// Boolean switch: the flag can only turn it on; a file value of
    /// true/false is honored when the flag is absent.
    fn resolve_flag(&mut self, flag: bool, key: &str) -> Result<bool> {
        let value = if flag {
            true
        } else {
            match self.file.get(key).map(|s| s.as_str()) {
                None => false,
                Some("true") => true,
                Some("false") => false,
                Some(other) => bail!("config key {key}={other}: expected true or false"),
            }
        };
        self.effective.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    fn note(&mut self, key: &str, value: impl Display) {
        self.effective.push((key.to_string(), value.to_string()));
    }

    /// Write the effective configuration to `<out>/effective.cfg`.
    fn echo(&self, out: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.effective {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let path = out.join("effective.cfg");
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        print!("{text}");
        Ok(())
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output dir {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<(Model, Vocabulary, u64)> {
    let ckpt =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ckpt.into_model()
        .context("restoring model from checkpoint")
}

fn load_corpus(path: &Path) -> Result<Vec<Example>> {
    let examples =
        data::load_jsonl(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if examples.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(examples)
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "confident" => Ok(Mode::Confident),
        "baseline" => Ok(Mode::Baseline),
        other => bail!("unknown mode {other:?}: expected confident or baseline"),
    }
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of training examples.
    #[arg(long)]
    n: Option<usize>,
    /// Fraction of references with one unsupported value token.
    #[arg(long)]
    divergence: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_ref())?;
    let n = s.resolve(a.n, "n", 2000)?;
    let divergence = s.resolve(a.divergence, "divergence", 0.3)?;
    let seed = s.resolve(a.seed, "seed", 0)?;
    ensure_out(&a.out)?;
    let cfg = SynthConfig::new(n, divergence, seed);
    let ds = data::generate_synthetic(&cfg)?;
    data::save_jsonl(&ds.train, &a.out.join("train.jsonl"))?;
    data::save_jsonl(&ds.valid, &a.out.join("valid.jsonl"))?;
    data::save_jsonl(&ds.test, &a.out.join("test.jsonl"))?;
    s.note("train_examples", ds.train.len());
    s.note("valid_examples", ds.valid.len());
    s.note("test_examples", ds.test.len());
    s.echo(&a.out)
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with train.jsonl and valid.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// confident | baseline
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    encoder_hidden: Option<usize>,
    #[arg(long)]
    decoder_hidden: Option<usize>,
    #[arg(long)]
    vocab_max: Option<usize>,
    /// Disable the copy/pointer mechanism.
    #[arg(long)]
    no_copy: bool,
    /// Monte Carlo samples per example.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Epochs with the confidence parameters frozen at their init.
    #[arg(long)]
    warmup: Option<usize>,
    /// Learning-rate multiplier for the epochs after the warmup.
    #[arg(long)]
    vb_lr_scale: Option<f64>,
    /// Kappa-only calibration epochs run after the main fit.
    #[arg(long)]
    cal_epochs: Option<usize>,
    /// Learning rate of the kappa-only calibration phase.
    #[arg(long)]
    cal_lr: Option<f64>,
    #[arg(long)]
    dropout_input: Option<f64>,
    #[arg(long)]
    dropout_recurrent: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop skipped tokens instead of marking skip-runs with <null>.
    #[arg(long)]
    no_null_mode: bool,
    /// Ablation: score confidence by the output probability itself.
    #[arg(long)]
    no_confidence: bool,
    /// Ablation: plain maximum likelihood (calibration kept).
    #[arg(long)]
    no_variational: bool,
    /// Ablation: freeze the calibration weight at zero.
    #[arg(long)]
    no_calibration: bool,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_ref())?;
    let mode = parse_mode(&s.resolve(a.mode, "mode", "confident".to_string())?)?;
    let embed_dim = s.resolve(a.embed_dim, "embed_dim", 32)?;
    let encoder_hidden = s.resolve(a.encoder_hidden, "encoder_hidden", 32)?;
    let decoder_hidden = s.resolve(a.decoder_hidden, "decoder_hidden", 32)?;
    let vocab_max = s.resolve(a.vocab_max, "vocab_max", 512)?;
    let no_copy = s.resolve_flag(a.no_copy, "no_copy")?;
    let k = s.resolve(a.k, "k", 8)?;
    let lr = s.resolve(a.lr, "lr", 5e-4)?;
    let batch_size = s.resolve(a.batch_size, "batch_size", 1)?;
    let epochs = s.resolve(a.epochs, "epochs", 20)?;
    let patience = s.resolve(a.patience, "patience", 3)?;
    let warmup = s.resolve(a.warmup, "warmup", 2)?;
    let vb_lr_scale = s.resolve(a.vb_lr_scale, "vb_lr_scale", 1.0)?;
    let cal_epochs = s.resolve(a.cal_epochs, "cal_epochs", 2)?;
    let cal_lr = s.resolve(a.cal_lr, "cal_lr", 0.02)?;
    let dropout_input = s.resolve(a.dropout_input, "dropout_input", 0.0)?;
    let dropout_recurrent = s.resolve(a.dropout_recurrent, "dropout_recurrent", 0.0)?;
    let seed = s.resolve(a.seed, "seed", 0)?;
    let no_null_mode = s.resolve_flag(a.no_null_mode, "no_null_mode")?;
    let no_confidence = s.resolve_flag(a.no_confidence, "no_confidence")?;
    let no_variational = s.resolve_flag(a.no_variational, "no_variational")?;
    let no_calibration = s.resolve_flag(a.no_calibration, "no_calibration")?;
    ensure_out(&a.out)?;
    s.echo(&a.out)?;

    let train = load_corpus(&a.data.join("train.jsonl"))?;
    let valid = load_corpus(&a.data.join("valid.jsonl"))?;
    let vocab = Vocabulary::build(data::corpus_tokens(&train), vocab_max);

    let mut model = Model::new(ModelConfig {
        vocab_size: vocab.len(),
        embed_dim,
        encoder_hidden,
        decoder_hidden,
        mode,
        copy_enabled: !no_copy,
        confidence_from_prob: no_confidence,
        seed,
    })?;
    let terms = if mode == Mode::Baseline {
        LossTerms::likelihood_only()
    } else {
        LossTerms {
            variational: !no_variational,
            base_lm: true,
            calibration: !no_calibration,
        }
    };
    let train_cfg = TrainConfig {
        k_samples: k,
        learning_rate: lr,
        batch_size,
        max_epochs: epochs,
        patience,
        null_mode: !no_null_mode,
        conf_warmup_epochs: warmup,
        vb_lr_scale,
        dropout: DropoutRates {
            input: dropout_input,
            recurrent: dropout_recurrent,
        },
        seed,
    };

    let log_path = a.out.join("train.log");
    let mut log_file = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = |line: &str| {
        println!("{line}");
        let _ = writeln!(log_file, "{line}");
    };
    let report = training::fit(&mut model, &vocab, &train, &valid, &train_cfg, terms, &mut log)?;
    if terms.calibration && cal_epochs > 0 {
        training::fit_calibration(
            &mut model,
            &vocab,
            &train,
            cal_epochs,
            cal_lr,
            k,
            !no_null_mode,
            seed,
            &mut log,
        )?;
    }
    drop(log);

    let steps = (report.epochs.len() * train.len()) as u64;
    Checkpoint::new(&model, &vocab, steps).save(&a.out.join("model.ckpt"))?;
    println!(
        "best epoch {} valid_loss {:.6}{}",
        report.best_epoch,
        report.best_valid_loss,
        if report.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus (JSONL) whose tables are decoded.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Length-penalty exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Confidence threshold below which tokens are emitted as <null>.
    #[arg(long)]
    null_threshold: Option<f64>,
    /// Decode with the uncalibrated distribution.
    #[arg(long)]
    no_calibration: bool,
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_ref())?;
    let beam = s.resolve(a.beam, "beam", 8)?;
    let max_len = s.resolve(a.max_len, "max_len", 32)?;
    let alpha = s.resolve(a.alpha, "alpha", 0.0)?;
    let null_threshold = s.resolve_opt(a.null_threshold, "null_threshold")?;
    let no_calibration = s.resolve_flag(a.no_calibration, "no_calibration")?;
    ensure_out(&a.out)?;
    s.echo(&a.out)?;

    let (model, vocab, _) = load_checkpoint(&a.ckpt)?;
    let examples = load_corpus(&a.data)?;
    let cfg = DecodeConfig {
        beam_size: beam,
        max_len,
        length_penalty_alpha: alpha,
        null_threshold: if model.cfg.mode == Mode::Confident {
            null_threshold
        } else {
            None
        },
        use_calibration: !no_calibration,
    };
    cfg.validate()?;

    let to_text = |ids: &[usize]| {
        ids.iter()
            .map(|&i| vocab.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut predictions = String::new();
    let mut emissions = String::new();
    for ex in &examples {
        let src = data::linearize(&ex.table, &vocab).ids;
        let out = decoding::beam_search(&model, &src, &cfg)?;
        predictions.push_str(&to_text(&out.tokens));
        predictions.push('\n');
        emissions.push_str(&to_text(&out.emission));
        emissions.push('\n');
    }
    write_file(&a.out.join("predictions.txt"), &predictions)?;
    write_file(&a.out.join("emissions.txt"), &emissions)?;
    println!("decoded {} examples", examples.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus (JSONL) with references, tables and support labels.
    #[arg(long)]
    data: PathBuf,
    /// Predictions file, one space-separated sentence per line.
    #[arg(long)]
    pred: PathBuf,
    /// Add-one smoothing for higher-order BLEU counts.
    #[arg(long)]
    smoothing: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Per-token (confidence, label) pairs from teacher-forced traces of the
/// labeled references. Confident-mode models only.
fn confidence_items(
    model: &Model,
    vocab: &Vocabulary,
    examples: &[Example],
) -> Result<Option<Vec<(f64, SupportLabel)>>> {
    if model.cfg.mode != Mode::Confident {
        return Ok(None);
    }
    let mut items = Vec::new();
    for ex in examples {
        let Some(labels) = &ex.support_labels else {
            continue;
        };
        let src = data::linearize(&ex.table, vocab).ids;
        let y = vocab.ids(&ex.reference);
        let rows = decoding::trace(model, &src, &y)?;
        items.extend(rows.iter().zip(labels).map(|(r, &l)| (r.confidence, l)));
    }
    Ok(if items.is_empty() { None } else { Some(items) })
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_ref())?;
    let smoothing = s.resolve_flag(a.smoothing, "smoothing")?;
    ensure_out(&a.out)?;
    s.echo(&a.out)?;

    let (model, vocab, _) = load_checkpoint(&a.ckpt)?;
    let examples = load_corpus(&a.data)?;
    let pred_text = fs::read_to_string(&a.pred)
        .with_context(|| format!("reading predictions {}", a.pred.display()))?;
    let predictions: Vec<Vec<String>> = pred_text
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect();
    if predictions.len() != examples.len() {
        bail!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        );
    }
    let references: Vec<Vec<String>> = examples.iter().map(|e| e.reference.clone()).collect();
    let tables: Vec<_> = examples.iter().map(|e| e.table.clone()).collect();
    let items = confidence_items(&model, &vocab, &examples)?;
    let report = metrics::build_report(
        &predictions,
        &references,
        &tables,
        smoothing,
        items.as_deref(),
    )?;
    write_file(&a.out.join("metrics.json"), &report.to_json())?;
    print!("{}", report.to_text_table());
    Ok(())
}

// ---------------------------------------------------------------------------
// trace

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based example index within the corpus.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_ref())?;
    let index = s.resolve(a.index, "index", 0)?;
    ensure_out(&a.out)?;
    s.echo(&a.out)?;

    let (model, vocab, _) = load_checkpoint(&a.ckpt)?;
    let examples = load_corpus(&a.data)?;
    let ex = examples
        .get(index)
        .with_context(|| format!("index {index} outside corpus of {}", examples.len()))?;
    let src = data::linearize(&ex.table, &vocab).ids;
    let y = vocab.ids(&ex.reference);
    let rows = decoding::trace(&model, &src, &y)?;
    let mut tsv = String::from("token\ta_score\tp_b\tconfidence\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            vocab.token(r.token),
            r.a_score,
            r.p_b,
            r.confidence
        ));
    }
    write_file(&a.out.join("trace.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// probe

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_ref())?;
    let trials = s.resolve(a.trials, "trials", 5)?;
    let max_len = s.resolve(a.max_len, "max_len", 32)?;
    let seed = s.resolve(a.seed, "seed", 0)?;
    ensure_out(&a.out)?;
    s.echo(&a.out)?;

    let (model, vocab, _) = load_checkpoint(&a.ckpt)?;
    let examples = load_corpus(&a.data)?;
    let sources = decoding::example_sources(&examples, &vocab);
    let mut csv = String::from("p,mean_changed,stddev\n");
    for i in 0..=5 {
        let p = i as f64 / 10.0;
        let (mean, sd) = decoding::source_sensitivity_probe(
            &model, &sources, p, trials, max_len, seed,
        )?;
        csv.push_str(&format!("{p:.1},{mean:.6},{sd:.6}\n"));
    }
    write_file(&a.out.join("probe.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let (model, vocab, steps) = load_checkpoint(&a.ckpt)?;
    let cfg = &model.cfg;
    println!(
        "mode {} | vocab {} | embed {} | encoder {} | decoder {}",
        match cfg.mode {
            Mode::Confident => "confident",
            Mode::Baseline => "baseline",
        },
        vocab.len(),
        cfg.embed_dim,
        cfg.encoder_hidden,
        cfg.decoder_hidden
    );
    println!(
        "parameters {} | steps {} | copy {}",
        model.params.num_scalars(),
        steps,
        cfg.copy_enabled
    );
    if cfg.mode == Mode::Confident {
        let cp = ConfidenceParams::from_model(&model);
        println!("rho {:.4} gamma {:.4} kappa {:.4}", cp.rho, cp.gamma, cp.kappa);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn run_args(args: &[&str]) -> i32 {
        let mut argv = vec!["confidec"];
        argv.extend_from_slice(args);
        run(argv)
    }

    fn path_str(p: &Path) -> String {
        p.display().to_string()
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run_args(&["synth", "--bogus", "1", "--out", "x"]), 2);
        assert_eq!(run_args(&["frobnicate"]), 2);
    }

    #[test]
    fn synth_is_deterministic_bit_for_bit() {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        for d in [&d1, &d2] {
            let code = run_args(&[
                "synth",
                "--n",
                "12",
                "--divergence",
                "0.5",
                "--seed",
                "7",
                "--out",
                &path_str(d.path()),
            ]);
            assert_eq!(code, 0);
        }
        for name in ["train.jsonl", "valid.jsonl", "test.jsonl"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn corrupted_checkpoint_is_runtime_error() {
        let d = TempDir::new().unwrap();
        let ckpt = d.path().join("model.ckpt");
        fs::write(&ckpt, "not json").unwrap();
        let code = run_args(&["inspect", "--ckpt", &path_str(&ckpt)]);
        assert_eq!(code, 1);
        let code = run_args(&[
            "generate",
            "--ckpt",
            &path_str(&ckpt),
            "--data",
            "nope.jsonl",
            "--out",
            &path_str(d.path()),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn fresh_checkpoint_inspects_with_initial_confidence_params() {
        let d = TempDir::new().unwrap();
        let vocab = Vocabulary::build(["a".to_string()].into_iter(), 50);
        let model = Model::new(ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 4,
            encoder_hidden: 4,
            decoder_hidden: 4,
            mode: Mode::Confident,
            copy_enabled: true,
            confidence_from_prob: false,
            seed: 0,
        })
        .unwrap();
        let ckpt = d.path().join("model.ckpt");
        Checkpoint::new(&model, &vocab, 0).save(&ckpt).unwrap();
        assert_eq!(run_args(&["inspect", "--ckpt", &path_str(&ckpt)]), 0);
        let cp = ConfidenceParams::from_model(&model);
        assert_eq!((cp.rho, cp.gamma, cp.kappa), (0.0, 1.0, 0.0));
    }

    #[test]
    fn config_file_supplies_values_and_flags_override() {
        let d = TempDir::new().unwrap();
        let cfg = d.path().join("run.cfg");
        fs::write(&cfg, "n = 9\ndivergence = 0.0\n# comment\nseed = 3\n").unwrap();
        let out = d.path().join("out");
        let code = run_args(&[
            "synth",
            "--config",
            &path_str(&cfg),
            "--n",
            "5",
            "--out",
            &path_str(&out),
        ]);
        assert_eq!(code, 0);
        let eff = fs::read_to_string(out.join("effective.cfg")).unwrap();
        assert!(eff.contains("n = 5"), "flag should override file: {eff}");
        assert!(eff.contains("divergence = 0"), "{eff}");
        assert!(eff.contains("seed = 3"), "{eff}");
        let train = data::load_jsonl(&out.join("train.jsonl")).unwrap();
        assert_eq!(train.len(), 5);
    }

    #[test]
    fn pipeline_smoke_synth_train_generate_evaluate_trace_probe() {
        let d = TempDir::new().unwrap();
        let corpus = d.path().join("corpus");
        assert_eq!(
            run_args(&[
                "synth",
                "--n",
                "8",
                "--divergence",
                "0.3",
                "--seed",
                "1",
                "--out",
                &path_str(&corpus),
            ]),
            0
        );
        let run_dir = d.path().join("run");
        assert_eq!(
            run_args(&[
                "train",
                "--data",
                &path_str(&corpus),
                "--out",
                &path_str(&run_dir),
                "--embed-dim",
                "6",
                "--encoder-hidden",
                "6",
                "--decoder-hidden",
                "6",
                "--k",
                "2",
                "--epochs",
                "1",
            ]),
            0
        );
        let ckpt = run_dir.join("model.ckpt");
        assert!(ckpt.exists());
        assert!(run_dir.join("train.log").exists());
        let test_jsonl = corpus.join("test.jsonl");
        assert_eq!(
            run_args(&[
                "generate",
                "--ckpt",
                &path_str(&ckpt),
                "--data",
                &path_str(&test_jsonl),
                "--out",
                &path_str(&run_dir),
                "--beam",
                "2",
                "--max-len",
                "12",
                "--null-threshold",
                "0.5",
            ]),
            0
        );
        let preds = fs::read_to_string(run_dir.join("predictions.txt")).unwrap();
        assert!(!preds.contains("<null>"), "predictions must be null-free");
        assert!(run_dir.join("emissions.txt").exists());
        assert_eq!(
            run_args(&[
                "evaluate",
                "--ckpt",
                &path_str(&ckpt),
                "--data",
                &path_str(&test_jsonl),
                "--pred",
                &path_str(&run_dir.join("predictions.txt")),
                "--smoothing",
                "--out",
                &path_str(&run_dir),
            ]),
            0
        );
        let metrics_json = fs::read_to_string(run_dir.join("metrics.json")).unwrap();
        let report: metrics::MetricsReport = serde_json::from_str(&metrics_json).unwrap();
        assert!(report.bleu >= 0.0 && report.bleu <= 1.0);
        assert!(report.table_f1 >= 0.0 && report.table_f1 <= 1.0);
        assert_eq!(
            run_args(&[
                "trace",
                "--ckpt",
                &path_str(&ckpt),
                "--data",
                &path_str(&test_jsonl),
                "--index",
                "0",
                "--out",
                &path_str(&run_dir),
            ]),
            0
        );
        let tsv = fs::read_to_string(run_dir.join("trace.tsv")).unwrap();
        assert!(tsv.starts_with("token\ta_score\tp_b\tconfidence"));
        assert!(tsv.lines().count() > 1);
        assert_eq!(
            run_args(&[
                "probe",
                "--ckpt",
                &path_str(&ckpt),
                "--data",
                &path_str(&test_jsonl),
                "--trials",
                "2",
                "--max-len",
                "8",
                "--out",
                &path_str(&run_dir),
            ]),
            0
        );
        let csv = fs::read_to_string(run_dir.join("probe.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7); // header + p in {0.0 .. 0.5}
        assert!(csv.lines().nth(1).unwrap().starts_with("0.0,0.000000"));
        assert_eq!(run_args(&["inspect", "--ckpt", &path_str(&ckpt)]), 0);
    }
}
