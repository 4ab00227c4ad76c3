use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emostyle::dataset::{gen_synthetic, Dataset, Split, DEFAULT_STYLES_PER_EMOTION};
use emostyle::encoders::EmotionLabel;
use emostyle::eval::{self, EvalSet, ProbeConfig, StyleGroups};
use emostyle::gradsuite;
use emostyle::image::Image;
use emostyle::numerics::Real;
use emostyle::pipeline::{
    Content, SampleSettings, Stylizer, DEFAULT_STEPS, DEFAULT_S_CONTENT, DEFAULT_S_STYLE,
};
use emostyle::training::{
    pair_samples, run_stage1, run_stage2, style_samples, Arch, Checkpoint, EpochLog, Precision,
    TrainConfig, TrainState,
};
use emostyle::{Error, Result};

#[derive(Parser)]
#[command(name = "emostyle", version, about = "Emotion-driven image stylization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic triplet dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_STYLES_PER_EMOTION)]
        styles: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run stage 1 (style dictionaries) or stage 2 (reasoner and generator).
    Train(TrainArgs),
    /// Stylize one content image or text prompt.
    Infer(InferArgs),
    /// Generate held-out outputs and write a metric report.
    Eval(EvalArgs),
    /// Render one column per prototype of an emotion's dictionary.
    CodebookVis(VisArgs),
    /// Finite-difference checks of every primitive and training loss.
    Gradcheck {
        #[arg(long, default_value_t = gradsuite::DEFAULT_TRIALS)]
        trials: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: u8,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; stage 2 needs one holding dictionaries.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Loss log; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Sampling {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_S_STYLE)]
    s_style: f64,
    #[arg(long, default_value_t = DEFAULT_S_CONTENT)]
    s_content: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Sampling {
    fn settings(&self) -> SampleSettings {
        SampleSettings {
            steps: self.steps,
            s_style: self.s_style,
            s_content: self.s_content,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "prompt", required_unless_present = "prompt")]
    content: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    emotion: String,
    /// Use dictionary entry K instead of the reasoner's choice.
    #[arg(long)]
    style_index: Option<usize>,
    #[command(flatten)]
    sampling: Sampling,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampling: Sampling,
    #[arg(long)]
    save_images: Option<PathBuf>,
}

#[derive(Args)]
struct VisArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    emotion: String,
    /// Content image shared by every column.
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampling: Sampling,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

/// `EMOSTYLE_THREADS` caps rayon workers; 0 means a single thread.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("EMOSTYLE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        Error::InvalidArgument(format!(
            "EMOSTYLE_THREADS must be a non-negative integer, got '{v}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            n,
            styles,
            seed,
        } => {
            let header = gen_synthetic(&out, n, styles, seed)?;
            println!(
                "{}: {} triplets, seed {}",
                out.display(),
                header.n_triplets,
                header.seed
            );
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => evaluate(a),
        Command::CodebookVis(a) => codebook_vis(a),
        Command::Gradcheck { trials } => gradcheck(trials),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Config file keys first, then command-line flags.
fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::for_stage(a.stage),
    };
    if a.config.is_some() && cfg.stage != a.stage {
        let file = TrainConfig::for_stage(cfg.stage);
        let stage_default = TrainConfig::for_stage(a.stage);
        // Stage-dependent defaults follow the requested stage unless the
        // file set them explicitly.
        if cfg.epochs == file.epochs {
            cfg.epochs = stage_default.epochs;
        }
        if cfg.learning_rate == file.learning_rate {
            cfg.learning_rate = stage_default.learning_rate;
        }
    }
    cfg.stage = a.stage;
    if let Some(d) = &a.data {
        cfg.dataset_path = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    if a.stage != 1 && a.stage != 2 {
        return Err(invalid(format!(
            "--stage must be 1 or 2, got {}\nusage: emostyle train --stage 1|2 --out CKPT [--config PATH] [--data DIR] [--resume CKPT] [--seed N]",
            a.stage
        )));
    }
    if a.stage == 2 && a.resume.is_none() {
        return Err(invalid(
            "stage 2 needs the style dictionaries from stage 1; pass --resume STAGE1_CKPT",
        ));
    }
    let cfg = train_config(&a)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&a, cfg, resume),
        Precision::F64 => train_typed::<f64>(&a, cfg, resume),
    }
}

fn train_typed<T: Real>(a: &TrainArgs, cfg: TrainConfig, resume: Option<Checkpoint>) -> Result<()> {
    let mut state = match resume {
        Some(c) => {
            let mut s = TrainState::<T>::from_checkpoint(&c)?;
            s.reconfigure(cfg.clone());
            s
        }
        None => TrainState::<T>::new(cfg.clone(), Arch::default()),
    };
    if cfg.stage == 2 && state.dictionaries.is_none() {
        return Err(invalid(
            "the --resume checkpoint holds no style dictionaries; run stage 1 first",
        ));
    }
    let dataset = Dataset::load(&cfg.dataset_path)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let header = EpochLog::csv_header(cfg.stage);
    writeln!(log, "{header}").map_err(|e| Error::io(&log_path, e))?;
    println!("{header}");
    let mut write_line = |l: &EpochLog| -> std::io::Result<()> {
        println!("{}", l.csv_line());
        writeln!(log, "{}", l.csv_line())
    };
    let mut io_err = None;
    for l in state.history.iter().filter(|l| l.stage == cfg.stage) {
        write_line(l).map_err(|e| Error::io(&log_path, e))?;
    }
    if cfg.stage == 1 {
        let samples = style_samples(&dataset)?;
        run_stage1(&mut state, &samples, |l| {
            if let Err(e) = write_line(l) {
                io_err.get_or_insert(e);
            }
        })?;
    } else {
        let samples = pair_samples::<T>(&dataset, Split::Train)?;
        run_stage2(&mut state, &samples, |l, _| {
            if let Err(e) = write_line(l) {
                io_err.get_or_insert(e);
            }
        })?;
    }
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    state.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn parse_emotion(name: &str) -> Result<EmotionLabel> {
    name.parse()
}

/// A loaded checkpoint in whichever precision it was trained in.
enum Loaded {
    F32(TrainState<f32>),
    F64(TrainState<f64>),
}

fn load_state(path: &Path) -> Result<Loaded> {
    let c = Checkpoint::load(path)?;
    let cfg = TrainConfig::parse(&emostyle::training::unpack_text(
        c.get("meta.config")?,
        "meta.config",
    )?)?;
    Ok(match cfg.precision {
        Precision::F32 => Loaded::F32(TrainState::from_checkpoint(&c)?),
        Precision::F64 => Loaded::F64(TrainState::from_checkpoint(&c)?),
    })
}

macro_rules! with_state {
    ($loaded:expr, $s:ident => $body:expr) => {
        match $loaded {
            Loaded::F32($s) => $body,
            Loaded::F64($s) => $body,
        }
    };
}

fn infer(a: InferArgs) -> Result<()> {
    let emotion = parse_emotion(&a.emotion)?;
    let image = a.content.as_deref().map(Image::load_png).transpose()?;
    let content = match (&image, &a.prompt) {
        (Some(img), None) => Content::Image(img),
        (None, Some(p)) => Content::Prompt(p),
        _ => return Err(invalid("pass exactly one of --content or --prompt")),
    };
    let out = with_state!(load_state(&a.ckpt)?, s => {
        let sty = Stylizer::new(s.params()?, s.arch, s.dictionaries()?);
        sty.stylize(content, emotion, a.style_index, &a.sampling.settings())?
    });
    out.save_png(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn codebook_vis(a: VisArgs) -> Result<()> {
    let emotion = parse_emotion(&a.emotion)?;
    let probe = Image::load_png(&a.probe)?;
    let settings = a.sampling.settings();
    let columns = with_state!(load_state(&a.ckpt)?, s => {
        let sty = Stylizer::new(s.params()?, s.arch, s.dictionaries()?);
        let k = s.dictionaries()?.get(emotion).k();
        (0..k)
            .map(|i| sty.stylize(Content::Image(&probe), emotion, Some(i), &settings))
            .collect::<Result<Vec<_>>>()?
    });
    Image::hstack(&columns)?.save_png(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let settings = a.sampling.settings();
    let report = with_state!(load_state(&a.ckpt)?, s => {
        let dir = a.data.clone().unwrap_or_else(|| s.config.dataset_path.clone());
        let dataset = Dataset::load(&dir)?;
        let held = EvalSet::load(&dataset, Split::Test)?;
        let probe_cfg = ProbeConfig { seed: settings.seed, ..ProbeConfig::default() };
        let (probe, accuracy) = eval::train_gated_probe(&dataset, &held, &probe_cfg)?;
        let groups = StyleGroups::from_dataset(&dataset, Split::Train)?;
        let sty = Stylizer::new(s.params()?, s.arch, s.dictionaries()?);
        let generated = eval::generate(&sty, &held, &settings)?;
        if let Some(dir) = &a.save_images {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (i, (img, e)) in generated.iter().enumerate() {
                img.save_png(dir.join(format!("{i:04}_{e}.png")))?;
            }
        }
        eval::score(&probe, accuracy, &groups, &held, &generated, &settings, &s.config.hash())?
    });
    let text = eval::write_report(&report, &a.out)?;
    print!("{}", report.summary());
    println!("{}\n{}", a.out.display(), text.display());
    Ok(())
}

fn gradcheck(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(invalid("--trials must be positive"));
    }
    let results = gradsuite::run_all(trials)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<20} trials={:<3} max_rel_error={:.3e} tolerance={:.0e} {:.1}s {}",
            r.name,
            r.trials,
            r.max_rel_error,
            r.tolerance,
            r.seconds,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}
