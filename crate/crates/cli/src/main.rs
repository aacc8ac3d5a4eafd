//! `talkdit` command-line driver.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use talkdit::checkpoint::{DiTCheckpoint, VERSION};
use talkdit::config::{from_text, to_text, RunConfig};
use talkdit::encoders::PixelVideo;
use talkdit::evalmetrics::{evaluate_clip, ClipTruth, MetricReport};
use talkdit::model::{init_params, parameter_count};
use talkdit::numerics::RngState;
use talkdit::sampling::{read_ppm, write_ppm, write_video, Sampler};
use talkdit::synthdata::{corpus_specs, generate_sample, read_dataset, write_dataset, Sample};
use talkdit::training::{motion_norm, TrainExample, Trainer};

const TAG_INIT: u64 = 0x494e_4954;
const RECORD: &str = "run.toml";

#[derive(Parser)]
#[command(name = "talkdit", version, about = "Audio-driven talking-portrait video diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic talking-portrait dataset.
    GenData(GenDataArgs),
    /// Two-stage training: clip-level then frame-level audio alignment.
    Train(TrainArgs),
    /// Generate a video from a reference frame and an audio envelope.
    Sample(SampleArgs),
    /// Generate videos for dataset samples and report proxy metrics.
    Eval(EvalArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Config file with optional [data], [model], [train] and [sample] tables.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, the loss log and the run record.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps_clip: Option<usize>,
    #[arg(long)]
    steps_frame: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint; its configuration replaces the config file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long)]
    motion_l: Option<f32>,
    #[arg(long)]
    motion_b: Option<f32>,
    #[arg(long)]
    cfg_scale: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference frame as a binary PPM image.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Audio envelope as whitespace-separated numbers.
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: SamplingFlags,
    /// Skip the per-frame PPM dump.
    #[arg(long)]
    no_frames: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    flags: SamplingFlags,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    let cfg = match &arg.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            from_text(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn write_record(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = format!(
        "# talkdit {} {command}\n# checkpoint format version {VERSION}\n{}",
        env!("CARGO_PKG_VERSION"),
        to_text(cfg)?
    );
    let path = dir.join(RECORD);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    set(&mut cfg.data.samples, a.samples);
    set(&mut cfg.data.seed, a.seed);
    cfg.validate()?;
    let samples = corpus_specs(&cfg.model, cfg.data.samples, cfg.data.seed)
        .iter()
        .map(|s| generate_sample(&cfg.model, s))
        .collect::<talkdit::Result<Vec<_>>>()?;
    write_dataset(&samples, &cfg.model, &a.out)?;
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&s.video.frame(0), 0, &a.out.join(format!("sample_{i:05}_ref.ppm")))?;
        write_envelope(&s.spec.envelope, &a.out.join(format!("sample_{i:05}_audio.txt")))?;
    }
    write_record(&a.out, "gen-data", &cfg)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn write_envelope(env: &[f32], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for x in env {
        writeln!(f, "{x}")?;
    }
    f.flush()?;
    Ok(())
}

fn read_envelope(path: &Path) -> Result<Vec<f32>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            w.parse::<f32>()
                .with_context(|| format!("{}: value {} ({w:?}) is not a number", path.display(), i + 1))
        })
        .collect()
}

fn load_samples(dir: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let samples = read_dataset(dir)?;
    if samples.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    let v = &samples[0].video;
    let m = &cfg.model;
    if (v.frames(), v.height(), v.width()) != (m.frames, m.height, m.width) {
        bail!(
            "dataset clips are {}x{}x{} but the model expects {}x{}x{}",
            v.frames(),
            v.height(),
            v.width(),
            m.frames,
            m.height,
            m.width
        );
    }
    Ok(samples)
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut trainer, cfg) = match &a.resume {
        Some(p) => {
            let ck = DiTCheckpoint::load(p)?;
            let cfg = RunConfig {
                model: ck.model.clone(),
                train: ck.train.clone(),
                ..load_config(&a.config)?
            };
            (Trainer::from_checkpoint(&ck)?, cfg)
        }
        None => {
            let mut cfg = load_config(&a.config)?;
            set(&mut cfg.train.seed, a.seed);
            cfg.validate()?;
            let params = init_params(&cfg.model, &mut RngState::new(cfg.train.seed).derive(TAG_INIT, 0))?;
            (Trainer::new(&cfg.model, &cfg.train, params)?, cfg)
        }
    };
    let t = &mut trainer.train;
    set(&mut t.steps_clip, a.steps_clip);
    set(&mut t.steps_frame, a.steps_frame);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.checkpoint_every, a.checkpoint_every);
    t.validate()?;
    let cfg = RunConfig {
        train: trainer.train.clone(),
        model: trainer.model.clone(),
        ..cfg
    };

    let samples = load_samples(&a.data, &cfg)?;
    if trainer.motion_norm.is_none() {
        trainer.motion_norm = Some(motion_norm(&samples)?);
    }
    let data = samples
        .iter()
        .map(|s| TrainExample::from_sample(s, &cfg.model, &trainer.params))
        .collect::<talkdit::Result<Vec<_>>>()?;
    write_record(&a.out, "train", &cfg)?;

    let log_path = a.out.join("loss.ndjson");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let out = a.out.clone();
    let reports = trainer.run(&data, Some(&mut log), |ck| {
        let p = ck.progress;
        ck.save(&out.join(format!("step_{:06}.ckpt", p.total())))?;
        ck.save(&out.join("last.ckpt"))
    })?;
    log.flush()?;
    let p = trainer.progress;
    match reports.last() {
        Some(r) => println!(
            "trained {} steps ({} clip-level, {} frame-level); final loss {:.5}; checkpoint {}",
            reports.len(),
            p.clip_steps,
            p.frame_steps,
            r.loss,
            a.out.join("last.ckpt").display()
        ),
        None => println!("nothing to do: checkpoint already has {} + {} steps", p.clip_steps, p.frame_steps),
    }
    Ok(())
}

fn sampling_config(base: &RunConfig, f: &SamplingFlags) -> Result<talkdit::config::SampleConfig> {
    let mut s = base.sample.clone();
    set(&mut s.motion_l, f.motion_l);
    set(&mut s.motion_b, f.motion_b);
    set(&mut s.cfg_scale, f.cfg_scale);
    set(&mut s.steps, f.steps);
    set(&mut s.seed, f.seed);
    s.validate()?;
    Ok(s)
}

fn sample(a: SampleArgs) -> Result<()> {
    let ck = DiTCheckpoint::load(&a.checkpoint)?;
    let base = load_config(&a.config)?;
    let sc = sampling_config(&base, &a.flags)?;
    let reference: PixelVideo = read_ppm(&a.reference)?;
    let envelope = read_envelope(&a.audio)?;
    let out = Sampler::new(&ck).sample(&reference, &envelope, &sc)?;
    let cfg = RunConfig {
        model: ck.model.clone(),
        train: ck.train.clone(),
        sample: sc,
        ..base
    };
    write_video(&out.video, &a.out, "video", !a.no_frames)?;
    write_record(&a.out, "sample", &cfg)?;
    println!(
        "wrote {} frames to {} ({:.2}% of values clamped)",
        out.video.frames(),
        a.out.display(),
        100.0 * out.overflow
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = DiTCheckpoint::load(&a.checkpoint)?;
    let base = load_config(&a.config)?;
    let sc = sampling_config(&base, &a.flags)?;
    let cfg = RunConfig {
        model: ck.model.clone(),
        train: ck.train.clone(),
        sample: sc.clone(),
        ..base
    };
    let mut samples = load_samples(&a.data, &cfg)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let sampler = Sampler::new(&ck);
    let mut clips = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let run = talkdit::config::SampleConfig {
            seed: sc.seed.wrapping_add(i as u64),
            ..sc.clone()
        };
        let video = sampler.sample(&s.video.frame(0), &s.spec.envelope, &run)?.video;
        let truth = ClipTruth {
            envelope: &s.spec.envelope,
            mouth: &s.mouth_region,
            reference_crop: &s.face_crop,
            foreground: &s.foreground,
        };
        clips.push(evaluate_clip(&video, &truth, &ck.model, &ck.params)?);
    }
    let report = MetricReport::from_clips(&clips);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("report.txt"), format!("{report}\n"))?;
    fs::write(a.out.join("report.json"), report.to_json())?;
    write_record(&a.out, "eval", &cfg)?;
    println!("{report}");
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = DiTCheckpoint::load(&a.checkpoint)?;
    let stored: usize = ck.params.iter().map(|(_, t)| t.len()).sum();
    println!("checkpoint      {}", a.checkpoint.display());
    println!("format version  {VERSION}");
    println!(
        "progress        {} clip-level + {} frame-level steps",
        ck.progress.clip_steps, ck.progress.frame_steps
    );
    println!("parameters      {stored} in {} tensors (expected {})", ck.params.len(), parameter_count(&ck.model));
    println!(
        "optimizer       {}",
        ck.optimizer.as_ref().map_or("none".to_string(), |o| format!("adam, t = {}", o.t))
    );
    match ck.motion_norm {
        Some(n) => println!(
            "motion norm     lip [{:.3e}, {:.3e}], body [{:.3e}, {:.3e}]",
            n.lip.min, n.lip.max, n.body.min, n.body.max
        ),
        None => println!("motion norm     none"),
    }
    println!("rng             seed {}", ck.rng.seed);
    println!("\n[model]\n{}", to_text(&ck.model)?);
    println!("[train]\n{}", to_text(&ck.train)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !parts.last().is_some_and(|p| p.ends_with(&cause)) {
                    parts.push(cause);
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::FAILURE
        }
    }
}
