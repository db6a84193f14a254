use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use glyphcrm::finetune::{finetune_run, read_task_data, EvalReport, TaskModel, TaskSpec};
use glyphcrm::glyphsource::{parse_bdf, pgm_strip, rasterize, special_glyph, FontAtlas, Special};
use glyphcrm::model::{embed_text, GlyphBank, ModelConfig};
use glyphcrm::pretrain::{load_checkpoint, Corpus, Pretrainer, TrainConfig};

/// Glyph-based Chinese character representations.
#[derive(Parser, Debug)]
#[command(name = "glyphcrm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize characters to PGM images.
    Render(RenderArgs),
    /// Pretrain on a plain-text corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint on a labeled task.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint on a labeled file.
    Eval(EvalArgs),
    /// Print glyph vectors and final hidden states per character as JSON lines.
    Embed(EmbedArgs),
    /// Show the run configuration.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    font: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    font: Option<PathBuf>,
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total updates (overrides the config).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a pretraining checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    font: PathBuf,
    /// JSON task specification.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    font: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    font: PathBuf,
    #[arg(long)]
    text: String,
    /// Write to this file instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Print every setting with its default value.
    #[arg(long)]
    dump: bool,
}

/// Model and training settings plus optional input and output paths.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    font: Option<PathBuf>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
}

/// Misuse of the command line; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_font(path: &Path) -> Result<FontAtlas> {
    require_file(path, "font")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_bdf(&bytes).with_context(|| format!("parsing font {}", path.display()))
}

fn text_chars(text: &str) -> Result<Vec<char>> {
    let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    if chars.is_empty() {
        return Err(usage("--text is empty"));
    }
    Ok(chars)
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    require_file(path, "config")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn write_json_lines<T: Serialize>(records: &[T], out: Option<&Path>) -> Result<()> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let chars = text_chars(&args.text)?;
    let atlas = load_font(&args.font)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut glyphs = Vec::with_capacity(chars.len());
    for (i, &ch) in chars.iter().enumerate() {
        let glyph = if atlas.contains(ch) {
            rasterize(ch, &atlas)?
        } else {
            log::warn!("no glyph for {ch:?} (U+{:04X}); rendering [UNK]", ch as u32);
            special_glyph(Special::Unk)
        };
        let path = args.out.join(format!("{i:03}_U+{:04X}.pgm", ch as u32));
        fs::write(&path, glyph.to_pgm()).with_context(|| format!("writing {}", path.display()))?;
        glyphs.push(glyph);
    }
    let strip = args.out.join("strip.pgm");
    fs::write(&strip, pgm_strip(&glyphs)).with_context(|| format!("writing {}", strip.display()))?;
    println!("wrote {} glyphs to {}", glyphs.len(), args.out.display());
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let corpus_path = args.corpus.or(cfg.corpus).ok_or_else(|| usage("--corpus is required"))?;
    let font_path = args.font.or(cfg.font).ok_or_else(|| usage("--font is required"))?;
    let out = args.out.or(cfg.out).ok_or_else(|| usage("--out is required"))?;
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    require_file(&corpus_path, "corpus")?;
    let atlas = load_font(&font_path)?;
    let corpus = Corpus::read(&corpus_path)?;
    let mut trainer = match &args.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            let mut ckpt = load_checkpoint(p)?;
            ckpt.meta.train.steps = cfg.train.steps;
            Pretrainer::resume(corpus, atlas, ckpt)?
        }
        None => Pretrainer::new(corpus, atlas, cfg.model, cfg.train)?,
    };
    log::info!("vocabulary: {} entries", trainer.vocab().len());
    let until = trainer.train_config().steps;
    let summary = trainer.run(until, Some(&out))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    require_file(&args.task, "task")?;
    let text = fs::read_to_string(&args.task).with_context(|| format!("reading {}", args.task.display()))?;
    let mut spec: TaskSpec =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid task {}: {e}", args.task.display())))?;
    if let Some(e) = args.epochs {
        spec.epochs = e;
    }
    if let Some(lr) = args.lr {
        spec.lr = lr;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    for (p, what) in [(&args.checkpoint, "checkpoint"), (&args.train, "train file"), (&args.dev, "dev file")] {
        require_file(p, what)?;
    }
    if let Some(t) = &args.test {
        require_file(t, "test file")?;
    }
    let atlas = load_font(&args.font)?;
    let pretrained = load_checkpoint(&args.checkpoint)?;
    let train = read_task_data(&args.train, &spec)?;
    let dev = read_task_data(&args.dev, &spec)?;
    let test = args.test.as_deref().map(|p| read_task_data(p, &spec)).transpose()?;
    let outcome = finetune_run(pretrained, atlas, spec, &train, &dev, test.as_deref())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    outcome.checkpoint.save(&args.out.join("model.gcrm"))?;
    let report = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "history": outcome.history,
        "dev": outcome.dev,
        "test": outcome.test,
    });
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("best epoch {}", outcome.best_epoch);
    print_report("dev", &outcome.dev);
    if let Some(t) = &outcome.test {
        print_report("test", t);
    }
    Ok(())
}

fn print_report(name: &str, r: &EvalReport) {
    println!("[{name}]");
    print!("{}", r.to_table());
}

fn eval(args: EvalArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.data, "data file")?;
    let atlas = load_font(&args.font)?;
    let model = TaskModel::from_checkpoint(load_checkpoint(&args.checkpoint)?)?;
    let data = read_task_data(&args.data, &model.spec)?;
    let report = model.evaluate(&mut GlyphBank::new(atlas), &data)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let chars = text_chars(&args.text)?;
    require_file(&args.checkpoint, "checkpoint")?;
    let atlas = load_font(&args.font)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let records = embed_text(&ckpt.params, &ckpt.meta.model, &mut GlyphBank::new(atlas), &chars)?;
    write_json_lines(&records, args.out.as_deref())
}

fn config(args: ConfigArgs) -> Result<()> {
    if !args.dump {
        return Err(usage("nothing to do; pass --dump"));
    }
    println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("GLYPHCRM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("GLYPHCRM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Render(a) => render(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Embed(a) => embed(a),
        Command::Config(a) => config(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}
