use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mginr::codec::{decode_stream, encode_sequence, motion_masks, CodecError};
use mginr::compress::{read_header, CompressError};
use mginr::config::{Config, ConfigError};
use mginr::dataio::{frame_path, generate_synthetic, load_sequence, save_sequence, write_pgm, SynthSpec};
use mginr::metrics::{bd_rate, psnr, psnr_per_frame, rd_from_csv, rd_to_csv, ssim, ssim_per_frame, QualityKey, RDPoint};
use mginr::training::TrainError;

#[derive(Parser)]
#[command(name = "mginr", version, about = "Multi-grid neural representation codec for multi-view video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a representation of a sequence and write the compressed stream
    Encode(EncodeArgs),
    /// Reconstruct every frame of a stream as PPM files
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare a reconstruction against its source and emit an RD point
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        bitstream: PathBuf,
        /// RD CSV to write, or to extend with `--append`
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        append: bool,
    },
    /// BD-rate of a test RD curve against an anchor curve
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "psnr")]
        key: String,
    },
    /// Generate a synthetic multi-view sequence with ground-truth motion masks
    Synth(SynthArgs),
    /// Print header fields and per-tensor sizes of a stream
    Info {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// key=value config file; defaults are used for missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// latent channels from the quality ladder: 20, 30, 40, 60 or 80
    #[arg(long)]
    quality: Option<usize>,
    #[arg(long)]
    no_ge: bool,
    #[arg(long)]
    no_motion: bool,
    /// extra `key=value` overrides applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// write motion masks as PGM files under this directory
    #[arg(long)]
    dump_masks: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    /// scene description file; overrides the dimension flags
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 config, 3 numeric failure, 4 corrupt stream, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(c) = cause.downcast_ref::<CodecError>() {
            match c {
                CodecError::Config(_) => return 2,
                CodecError::Train(TrainError::Diverged { .. }) => return 3,
                CodecError::Compress(_) => return 4,
                _ => {}
            }
        }
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
        if cause.is::<CompressError>() {
            return 4;
        }
    }
    1
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Encode(args) => encode(args),
        Command::Decode { input, output } => decode(&input, &output),
        Command::Eval {
            recon,
            source,
            bitstream,
            csv,
            append,
        } => eval(&recon, &source, &bitstream, &csv, append),
        Command::Bdrate { anchor, test, key } => bdrate(&anchor, &test, &key),
        Command::Synth(args) => synth(args),
        Command::Info { input } => info(&input),
    }
}

fn load_config(args: &EncodeArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Config::from_text(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => Config::default(),
    };
    if let Some(c) = args.quality {
        cfg.set_quality(c)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            detail: format!("--set expects key=value, got `{kv}`"),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if args.no_ge {
        cfg.ge_channels = 0;
    }
    if args.no_motion {
        cfg.motion = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `out.mgnr` -> `out.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn encode(args: EncodeArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let video = load_sequence(&args.input)?;
    // catch size mismatches before any training
    let grid = cfg.grid_config(video.views, video.frames, video.height, video.width)?;
    cfg.net_config(&grid)?;
    log::info!(
        "encoding {} views x {} frames of {}x{}",
        video.views,
        video.frames,
        video.height,
        video.width
    );
    if let Some(dir) = &args.dump_masks {
        motion_masks(&video, &cfg)?.dump_pgm(dir)?;
    }
    let out = encode_sequence(&video, &cfg)?;
    fs::write(&args.output, &out.encoded.bytes).with_context(|| format!("writing {}", args.output.display()))?;
    out.train_log.write_csv(&sibling(&args.output, "train.csv"))?;
    if let Some(log) = &out.finetune_log {
        log.write_csv(&sibling(&args.output, "finetune.csv"))?;
    }
    fs::write(sibling(&args.output, "cfg"), cfg.to_text())?;
    println!(
        "bytes={} bpp={} psnr={} ssim={} seconds={:.2}",
        out.encoded.bytes.len(),
        out.bpp,
        out.psnr,
        out.ssim,
        out.seconds
    );
    Ok(())
}

fn decode(input: &Path, output: &Path) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let (_, frames) = decode_stream(&bytes)?;
    save_sequence(output, &frames)?;
    println!("wrote {} frames to {}", frames.all_frames().len(), output.display());
    Ok(())
}

fn eval(recon: &Path, source: &Path, bitstream: &Path, csv: &Path, append: bool) -> Result<()> {
    let r = load_sequence(recon)?;
    let s = load_sequence(source)?;
    if (r.views, r.frames) != (s.views, s.frames) {
        bail!("reconstruction has {}x{} frames, source {}x{}", r.views, r.frames, s.views, s.frames);
    }
    let bytes = fs::read(bitstream).with_context(|| format!("reading {}", bitstream.display()))?;
    let header = read_header(&bytes)?;
    if (header.views, header.frames) != (s.views, s.frames) {
        bail!("bitstream describes {}x{} frames, source has {}x{}", header.views, header.frames, s.views, s.frames);
    }
    let point = RDPoint {
        bpp: mginr::compress::measure_bpp(bytes.len(), s.views, s.frames, s.height, s.width),
        psnr: psnr(r.all_frames(), s.all_frames())?,
        ssim: ssim(r.all_frames(), s.all_frames())?,
    };
    let mut points = if append && csv.exists() {
        rd_from_csv(&fs::read_to_string(csv)?)?
    } else {
        Vec::new()
    };
    points.push(point);
    fs::write(csv, rd_to_csv(&points))?;

    let p = psnr_per_frame(r.all_frames(), s.all_frames())?;
    let q = ssim_per_frame(r.all_frames(), s.all_frames())?;
    let mut detail = String::from("view,frame,psnr,ssim\n");
    for (i, (p, q)) in p.iter().zip(&q).enumerate() {
        detail.push_str(&format!("{},{},{p},{q}\n", i / s.frames, i % s.frames));
    }
    fs::write(sibling(csv, "frames.csv"), detail)?;
    println!("bpp={} psnr={} ssim={}", point.bpp, point.psnr, point.ssim);
    Ok(())
}

fn bdrate(anchor: &Path, test: &Path, key: &str) -> Result<()> {
    let key = QualityKey::parse(key).ok_or_else(|| ConfigError::Value {
        key: "key".into(),
        detail: format!("`{key}` is not psnr or ssim"),
    })?;
    let read = |p: &Path| -> Result<Vec<RDPoint>> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        rd_from_csv(&text).with_context(|| format!("in {}", p.display()))
    };
    let r = bd_rate(&read(anchor)?, &read(test)?, key)?;
    println!("bd_rate={r}%");
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => SynthSpec::from_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::desk(args.views, args.frames, args.height, args.width, args.seed),
    };
    let (video, masks) = generate_synthetic(&spec)?;
    save_sequence(&args.output, &video)?;
    for v in 0..video.views {
        for t in 0..video.frames {
            let m: Vec<f32> = masks[v * video.frames + t].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let path = frame_path(&args.output, v, t).with_file_name(format!("gt{t:04}.pgm"));
            write_pgm(&path, video.width, video.height, &m)?;
        }
    }
    fs::write(args.output.join("synth.txt"), spec.to_text())?;
    println!(
        "wrote {} views x {} frames of {}x{} to {}",
        video.views,
        video.frames,
        video.height,
        video.width,
        args.output.display()
    );
    Ok(())
}

fn info(input: &Path) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let (decoded, _) = decode_stream(&bytes)?;
    let h = &decoded.header;
    println!("mode={:?} activation={}", h.mode(), h.activation().name());
    println!("views={} frames={} height={} width={}", h.views, h.frames, h.height, h.width);
    println!("latent={}x{} c1={} c2={} ge_channels={}", h.h, h.w, h.c1, h.c2, h.ge_channels);
    println!("upscales={:?} channels={:?}", h.upscales, h.channels);
    println!("tensor_count={}", h.tensor_count);
    for t in &decoded.tensors {
        println!(
            "  {:<24} {:>14} scale={:e} zp={} pruned={} bitmap_bytes={} payload_bits={}",
            t.name,
            format!("{:?}", t.shape),
            t.scale,
            t.zero_point,
            t.pruned,
            t.bitmap_bytes,
            t.payload_bits
        );
    }
    let s = &decoded.stats;
    println!(
        "total_bytes={} payload_bytes={} overhead_bytes={} bitmap_bytes={} overhead={:.4}",
        s.total_bytes,
        s.payload_bytes,
        s.overhead_bytes,
        s.bitmap_bytes,
        s.overhead_fraction()
    );
    Ok(())
}
