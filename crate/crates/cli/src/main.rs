mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::Overrides;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(wildcascade::Error),
}

impl From<wildcascade::Error> for CliError {
    fn from(e: wildcascade::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        fn core(e: &wildcascade::Error) -> u8 {
            use wildcascade::Error::*;
            match e {
                Frame { source, .. } => core(source),
                Argument(_) => 2,
                Numeric(_) => 4,
                _ => 3,
            }
        }
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => core(e),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "wildcascade", version, about = "GAN enhancement and single-shot detection on degraded imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; keys are flat and dotted, e.g. `"gan.epochs": 5`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key; the value is parsed as JSON, else taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with annotations.
    MakeCorpus {
        #[command(flatten)]
        common: Common,
        /// shapes | scenes
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the DCGAN (latent) or the enhancement refiner (conditional).
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// latent | conditional
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the single-shot detector.
    TrainSsd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Discriminator checkpoint whose conv stages initialize the backbone.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Enhance a PNG, a directory of PNGs, or a GIF.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Target size as WIDTHxHEIGHT.
        #[arg(long)]
        target: Option<String>,
    },
    /// Detect objects, optionally enhancing first.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        cascade: bool,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        target: Option<String>,
        /// Also write PNGs with the detections drawn.
        #[arg(long)]
        render: bool,
    },
    /// Linear probe on discriminator features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        discriminator: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        l2: Option<f64>,
    },
    /// Score a detector (or the cascade) on an annotated set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        cascade: bool,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Score baseline and cascade side by side.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        target: Option<String>,
    },
}

/// Collects flag values as config overrides.
struct Flags(Overrides);

impl Flags {
    fn new() -> Self {
        Flags(Vec::new())
    }

    fn opt<T: Into<Value>>(mut self, key: &str, v: Option<T>) -> Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
        self
    }

    fn path(self, key: &str, v: Option<PathBuf>) -> Self {
        self.opt(key, v.map(|p| p.to_string_lossy().into_owned()))
    }

    fn switch(self, key: &str, on: bool) -> Self {
        self.opt(key, on.then_some(true))
    }

    fn finish(mut self, common: &Common, seed_key: &str) -> Result<Overrides, CliError> {
        if let Some(s) = common.seed {
            self.0.push((seed_key.to_string(), s.into()));
        }
        if let Some(o) = &common.out {
            self.0.push(("out".into(), o.to_string_lossy().into_owned().into()));
        }
        for item in &common.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            self.0.push((k.to_string(), v));
        }
        Ok(self.0)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::MakeCorpus { common, kind, count, size } => {
            let o = Flags::new().opt("kind", kind).opt("count", count).opt("size", size).finish(&common, "seed")?;
            c::make_corpus(common.config.as_deref(), o)
        }
        Command::TrainGan { common, data, mode, epochs } => {
            let o = Flags::new().path("data", data).opt("mode", mode).opt("gan.epochs", epochs).finish(&common, "gan.seed")?;
            c::train_gan(common.config.as_deref(), o)
        }
        Command::TrainSsd { common, data, backbone, epochs } => {
            let o = Flags::new()
                .path("data", data)
                .path("backbone", backbone)
                .opt("detector.epochs", epochs)
                .finish(&common, "detector.seed")?;
            c::train_ssd(common.config.as_deref(), o)
        }
        Command::Enhance { common, generator, input, target } => {
            let o = Flags::new().path("generator", generator).path("input", input).opt("target", target).finish(&common, "seed")?;
            c::enhance(common.config.as_deref(), o)
        }
        Command::Detect { common, detector, generator, input, cascade, conf, target, render } => {
            let o = Flags::new()
                .path("detector", detector)
                .path("generator", generator)
                .path("input", input)
                .switch("cascade", cascade)
                .opt("conf", conf)
                .opt("target", target)
                .switch("render", render)
                .finish(&common, "seed")?;
            c::detect_cmd(common.config.as_deref(), o)
        }
        Command::Probe { common, discriminator, data, l2 } => {
            let o = Flags::new().path("discriminator", discriminator).path("data", data).opt("l2", l2).finish(&common, "seed")?;
            c::probe(common.config.as_deref(), o)
        }
        Command::Eval { common, detector, generator, data, cascade, conf, iou } => {
            let o = Flags::new()
                .path("detector", detector)
                .path("generator", generator)
                .path("data", data)
                .switch("cascade", cascade)
                .opt("conf", conf)
                .opt("iou", iou)
                .finish(&common, "seed")?;
            c::eval(common.config.as_deref(), o)
        }
        Command::Compare { common, detector, generator, data, conf, iou, target } => {
            let o = Flags::new()
                .path("detector", detector)
                .path("generator", generator)
                .path("data", data)
                .opt("conf", conf)
                .opt("iou", iou)
                .opt("target", target)
                .finish(&common, "seed")?;
            c::compare(common.config.as_deref(), o)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
