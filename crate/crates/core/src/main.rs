use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tpie_core::checkpoint::Checkpoint;
use tpie_core::datagen::{self, DatagenConfig, DatasetManifest, Split};
use tpie_core::diffeo::{self, DeformationField, Grid, TopologyReport};
use tpie_core::diffusion::GuidanceConfig;
use tpie_core::io;
use tpie_core::metrics;
use tpie_core::pipeline::{self, Model, TrainConfig, Trainer};

const CHECKPOINT_FILE: &str = "checkpoint.tpie";

#[derive(Parser, Debug)]
#[command(name = "tpie", version, about = "Topology-preserving image editing")]
struct Cli {
    /// Master seed; every random draw is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with optional `datagen` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic growth dataset.
    GenData {
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Train registration and diffusion networks jointly.
    Train(TrainArgs),
    /// Sample edits of a template image.
    Sample(SampleArgs),
    /// Sample edits for a dataset split and score them.
    Eval(EvalArgs),
    /// Pixel-wise statistics of a set of samples, and deformation grids.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    registration_epochs: Option<usize>,
    #[arg(long)]
    diffusion_epochs: Option<usize>,
    /// Stop after this many trainer steps (epochs or fine-tuning blocks).
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct Guidance {
    #[arg(long)]
    guidance_image: Option<f64>,
    #[arg(long)]
    guidance_text: Option<f64>,
    /// Reverse-chain length; defaults to the schedule length.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Template image (`.pgm` or `.rawf32`).
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    instruction: String,
    #[command(flatten)]
    guidance: Guidance,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Samples per pair.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[command(flatten)]
    guidance: Guidance,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Directory of `sample_*.rawf32` images (as written by `sample`).
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Deformation field (`deformation_*.rawf32`) to draw as a warped grid.
    #[arg(long)]
    deformation_grid: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    grid_spacing: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    datagen: DatagenConfig,
    train: TrainConfig,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_bytes(path, text.as_bytes())?;
    Ok(())
}

fn guidance(model: &Model, defaults: GuidanceConfig, g: &Guidance) -> anyhow::Result<(GuidanceConfig, usize)> {
    let cfg = GuidanceConfig {
        image: g.guidance_image.unwrap_or(defaults.image),
        text: g.guidance_text.unwrap_or(defaults.text),
    };
    cfg.validate()?;
    let steps = g.steps.unwrap_or(model.schedule.steps);
    if steps == 0 || steps > model.schedule.steps {
        bail!("--steps must be in 1..={}", model.schedule.steps);
    }
    Ok((cfg, steps))
}

fn gen_data(cli: &Cli, n: usize) -> anyhow::Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let manifest = datagen::generate_dataset(n, &config.datagen, cli.seed, &cli.out)?;
    log::info!("wrote {} pairs to {}", manifest.records.len(), cli.out.display());
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let pairs = pipeline::load_split(&manifest, Split::Train)?;
    let apply_caps = |config: &mut TrainConfig| {
        if let Some(n) = args.max_outer {
            config.max_outer_iterations = n;
        }
        if let Some(n) = args.registration_epochs {
            config.registration_train.max_epochs = n;
        }
        if let Some(n) = args.diffusion_epochs {
            config.diffusion_train.max_epochs = n;
        }
    };
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            apply_caps(&mut ckpt.config);
            Trainer::from_checkpoint(&ckpt, pairs)?
        }
        None => {
            let mut config = load_config(cli.config.as_deref())?.train;
            apply_caps(&mut config);
            Trainer::new(config, cli.seed, pairs)?
        }
    };
    let path = cli.out.join(CHECKPOINT_FILE);
    let mut steps = 0;
    while !trainer.done() && args.max_steps.is_none_or(|m| steps < m) {
        if let Err(e) = trainer.step() {
            trainer.checkpoint().save(&path)?;
            log::error!("last good state written to {}", path.display());
            return Err(e.into());
        }
        steps += 1;
    }
    trainer.checkpoint().save(&path)?;
    write_json(&cli.out.join("train_state.json"), &trainer.state)?;
    log::info!("checkpoint written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord {
    index: usize,
    image: String,
    velocity: String,
    deformation: String,
    topology: TopologyReport,
}

#[derive(Serialize)]
struct SampleSummary {
    instruction: String,
    guidance: GuidanceConfig,
    steps: usize,
    seed: u64,
    samples: Vec<SampleRecord>,
}

fn sample(cli: &Cli, args: &SampleArgs) -> anyhow::Result<()> {
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let (g, steps) = guidance(&model, ckpt.config.guidance, &args.guidance)?;
    let template = io::read_image(&args.template)?;
    let templates = vec![&template; args.count];
    let instructions = vec![args.instruction.as_str(); args.count];
    let streams: Vec<u64> = (0..args.count as u64).collect();
    let outputs = pipeline::sample_batch(&model, &templates, &instructions, &g, steps, cli.seed, &streams)?;
    let mut records = Vec::with_capacity(outputs.len());
    for (i, out) in outputs.iter().enumerate() {
        let names = [
            format!("sample_{i:03}.rawf32"),
            format!("velocity_{i:03}.rawf32"),
            format!("deformation_{i:03}.rawf32"),
        ];
        io::write_rawf32(&cli.out.join(&names[0]), &out.image)?;
        io::write_pgm(&cli.out.join(format!("sample_{i:03}.pgm")), &out.image)?;
        io::write_rawf32(&cli.out.join(&names[1]), out.velocity.tensor())?;
        io::write_rawf32(&cli.out.join(&names[2]), out.deformation.displacement())?;
        if !out.topology.preserved() {
            log::warn!("sample {i}: {} of grid points fold", out.topology.frac_nonpositive);
        }
        let [image, velocity, deformation] = names;
        records.push(SampleRecord {
            index: i,
            image,
            velocity,
            deformation,
            topology: out.topology,
        });
    }
    write_json(
        &cli.out.join("samples.json"),
        &SampleSummary {
            instruction: args.instruction.clone(),
            guidance: g,
            steps,
            seed: cli.seed,
            samples: records,
        },
    )
}

fn eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let (g, steps) = guidance(&model, ckpt.config.guidance, &args.guidance)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let split = Split::from(args.split);
    let pairs = pipeline::load_split(&manifest, split)?;
    let report = pipeline::evaluate(&model, &pairs, split, args.samples, &g, steps, cli.seed)?;
    log::info!(
        "positivity {:.3}, mean SSD {:.3} (identity {:.3}), proxy Frechet {:.5}",
        report.positivity_rate,
        report.ssd_to_target.mean,
        report.identity_ssd.mean,
        report.proxy_frechet
    );
    write_json(&cli.out.join("eval_report.json"), &report)
}

fn render(cli: &Cli, args: &RenderArgs) -> anyhow::Result<()> {
    if args.samples.is_none() && args.deformation_grid.is_none() {
        bail!("nothing to render: pass --samples and/or --deformation-grid");
    }
    if let Some(dir) = &args.samples {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("sample_") && name.ends_with(".rawf32")
            })
            .collect();
        files.sort();
        let samples = files.iter().map(|p| io::read_rawf32(p)).collect::<tpie_core::Result<Vec<_>>>()?;
        let stats = metrics::pixelwise_stats(&samples)?;
        for (name, t) in [
            ("mean", &stats.mean),
            ("std", &stats.std),
            ("lower", &stats.lower),
            ("upper", &stats.upper),
        ] {
            io::write_rawf32(&cli.out.join(format!("{name}.rawf32")), t)?;
            io::write_pgm(&cli.out.join(format!("{name}.pgm")), t)?;
        }
        log::info!("pixel statistics over {} samples", samples.len());
    }
    if let Some(path) = &args.deformation_grid {
        let disp = io::read_rawf32(path)?;
        if disp.shape().len() != 3 || disp.shape()[0] != 2 {
            bail!("{}: expected a [2, H, W] displacement field", path.display());
        }
        let grid = Grid::new(disp.shape()[1..].to_vec())?;
        let phi = DeformationField::from_displacement(grid, disp)?;
        let overlay = diffeo::deformation_grid_overlay(&phi, args.grid_spacing.max(1))?;
        io::write_pgm(&cli.out.join("deformation_grid.pgm"), &overlay)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { n } => gen_data(cli, *n),
        Command::Train(a) => train(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Render(a) => render(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // --help and --version go to stdout.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
