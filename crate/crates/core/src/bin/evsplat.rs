use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use evsplat_core::dataset::codec::{encode_depth, encode_events};
use evsplat_core::dataset::generator::SCENES;
use evsplat_core::dataset::{
    decode_png, encode_png, generate_tiny_scene, load_checkpoint, load_dataset, save_checkpoint, Checkpoint, SceneSpec,
    Split,
};
use evsplat_core::metrics::evaluate;
use evsplat_core::raster::render;
use evsplat_core::simulator::{simulate_with_noise, FrameSequence, SimulatorNoise};
use evsplat_core::trainer::{deformed_at, write_loss_csv, TrainConfig, Trainer};
use evsplat_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "evsplat", version, about = "Event, depth and RGB fusion for dynamic Gaussian splatting")]
struct Cli {
    /// Seed for training and simulator noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Training configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Write one of the built-in analytic scenes as a dataset directory.
    Generate(GenerateArgs),
    /// Turn a frame sequence into an event file.
    Simulate(SimulateArgs),
    /// Optimize a model on a dataset.
    Train(TrainArgs),
    /// Render a checkpoint from the cameras of a dataset split.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct NoiseArgs {
    /// Standard deviation of Gaussian timestamp jitter, in seconds.
    #[arg(long, default_value_t = 0.0)]
    timestamp_jitter: f64,
    /// Relative standard deviation of the per-event threshold.
    #[arg(long, default_value_t = 0.0)]
    threshold_jitter: f64,
}

impl NoiseArgs {
    fn noise(&self, seed: Option<u64>) -> SimulatorNoise {
        SimulatorNoise {
            timestamp_jitter: self.timestamp_jitter,
            threshold_jitter: self.threshold_jitter,
            seed: seed.unwrap_or(0),
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    /// Multiplier on the scene motion; 0 gives a static scene.
    #[arg(long, default_value_t = 1.0)]
    motion: f64,
    #[arg(long)]
    contrast: Option<f64>,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Directory holding `frames.txt` (`<t> <file.png>` per line) and the
    /// frames it lists.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    frames: Option<PathBuf>,
    /// Simulate the event camera of a built-in scene instead.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    contrast: f64,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; `total_steps` may be raised by `--config`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "eval")]
    split: Split,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval")]
    split: Split,
    /// Write the per-view CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_config(path: Option<&Path>, base: TrainConfig) -> Result<TrainConfig> {
    match path {
        None => Ok(base),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::File { path: p.into(), source })?;
            let mut cfg = base;
            cfg.apply(&text)?;
            Ok(cfg)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| Error::File { path: parent.into(), source })?;
    }
    fs::write(path, bytes).map_err(|source| Error::File { path: path.into(), source })
}

fn generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let mut spec = SceneSpec::new(&args.scene);
    spec.motion = args.motion;
    spec.noise = args.noise.noise(cli.seed);
    if let Some(c) = args.contrast {
        spec.contrast = c;
    }
    if !SCENES.contains(&args.scene.as_str()) {
        return Err(Error::Config(format!("unknown scene {:?} (expected one of {})", args.scene, SCENES.join(", "))));
    }
    let ds = generate_tiny_scene(&spec, &args.out)?;
    println!(
        "wrote {} rgb, {} depth frames and {} events to {}",
        ds.rgb.len(),
        ds.depth.len(),
        ds.events.len(),
        args.out.display()
    );
    Ok(())
}

fn load_frames(dir: &Path) -> Result<FrameSequence> {
    let index = dir.join("frames.txt");
    let text = fs::read_to_string(&index).map_err(|source| Error::File { path: index.clone(), source })?;
    let mut frames = Vec::new();
    let mut stamps = Vec::new();
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(t), Some(file), None) = (parts.next(), parts.next(), parts.next()) else {
            problems.push(format!("frames.txt line {}: expected `<t> <file>`", n + 1));
            continue;
        };
        let Ok(t) = t.parse::<f64>() else {
            problems.push(format!("frames.txt line {}: bad timestamp {t:?}", n + 1));
            continue;
        };
        let path = dir.join(file);
        match fs::read(&path) {
            Ok(bytes) => match decode_png(&bytes) {
                Ok(img) => {
                    frames.push(img);
                    stamps.push(t);
                }
                Err(e) => problems.push(format!("{file}: {e}")),
            },
            Err(e) => problems.push(format!("{file}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    FrameSequence::new(frames, stamps)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let seq = match (&args.frames, &args.scene) {
        (Some(dir), _) => load_frames(dir)?,
        (None, Some(name)) => {
            let spec = SceneSpec::new(name);
            if !SCENES.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown scene {name:?} (expected one of {})", SCENES.join(", "))));
            }
            evsplat_core::dataset::generator::event_frames(&spec)?
        }
        (None, None) => return Err(Error::Config("simulate needs --frames or --scene".into())),
    };
    let stream = simulate_with_noise(&seq, args.contrast, &args.noise.noise(cli.seed))?;
    write_file(&args.out, &encode_events(&stream)?)?;
    println!("wrote {} events to {}", stream.len(), args.out.display());
    Ok(())
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("checkpoint_{step:06}.evck"))
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let report = load_dataset(&args.data)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    let ds = report.dataset;
    let resumed = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = resumed.as_ref().map_or_else(TrainConfig::default, |c| c.config.clone());
    let mut config = read_config(cli.config.as_deref(), base)?;
    if let Some(seed) = cli.seed {
        if resumed.is_some() && seed != config.seed {
            warn!("--seed ignored when resuming; the checkpoint carries its own generator state");
        } else {
            config.seed = seed;
        }
    }
    if let Some(steps) = args.steps {
        config.total_steps = steps;
    }
    config.validate()?;
    let trainer = Trainer::new(&ds, config.clone())?;
    let mut state = match resumed {
        Some(c) => c.state,
        None => trainer.init_state()?,
    };
    fs::create_dir_all(&args.out).map_err(|source| Error::File { path: args.out.clone(), source })?;
    write_file(&args.out.join("config.txt"), config.to_text().as_bytes())?;

    let csv = args.out.join("loss.csv");
    let append = args.resume.is_some();
    write_loss_csv(&csv, &[], append)?;
    let interval = config.checkpoint_interval;
    let mut pending = Vec::new();
    let started = std::time::Instant::now();
    trainer.train(&mut state, |state, r| {
        pending.push(*r);
        if r.step % 100 == 0 || r.step == config.total_steps {
            info!(
                "step {} ({:?}): total {:.6}, {} gaussians, {:.1}s",
                r.step,
                r.phase,
                r.loss.total,
                r.gaussians,
                started.elapsed().as_secs_f64()
            );
            write_loss_csv(&csv, &pending, true)?;
            pending.clear();
        }
        if interval > 0 && r.step % interval == 0 {
            save_checkpoint(
                &Checkpoint {
                    config: config.clone(),
                    state: state.clone(),
                },
                &checkpoint_path(&args.out, r.step),
            )?;
        }
        Ok(())
    })?;
    write_loss_csv(&csv, &pending, true)?;
    let final_path = args.out.join("final.evck");
    save_checkpoint(&Checkpoint { config, state }, &final_path)?;
    println!("trained to {}", final_path.display());
    Ok(())
}

fn render_views(args: &RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?.dataset;
    let background = ck.config.background.unwrap_or(ds.meta.background);
    let frames = ds.rgb_in(args.split);
    if frames.is_empty() {
        warn!("split {} has no frames", args.split.as_str());
    }
    for i in frames {
        let f = &ds.rgb[i];
        let gs = deformed_at(&ck.state, ds.meta.span, f.camera.timestamp)?;
        let out = render(&gs, &f.camera, background)?;
        let stem = Path::new(&f.file).file_stem().and_then(|s| s.to_str()).unwrap_or("view");
        write_file(&args.out.join(format!("{stem}.png")), &encode_png(&out.color)?)?;
        write_file(&args.out.join(format!("{stem}.dpth")), &encode_depth(&out.depth))?;
    }
    println!("rendered split {} to {}", args.split.as_str(), args.out.display());
    Ok(())
}

fn evaluate_split(args: &EvaluateArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?.dataset;
    let background = ck.config.background.unwrap_or(ds.meta.background);
    let report = evaluate(&ck.state, &ds, args.split, background)?;
    match &args.out {
        Some(path) => write_file(path, report.to_csv().as_bytes())?,
        None => print!("{}", report.to_csv()),
    }
    println!("{}", report.summary());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.verb {
        Verb::Generate(a) => generate(cli, a),
        Verb::Simulate(a) => simulate(cli, a),
        Verb::Train(a) => train(cli, a),
        Verb::Render(a) => render_views(a),
        Verb::Evaluate(a) => evaluate_split(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
