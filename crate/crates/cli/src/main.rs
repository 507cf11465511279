#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use msls::eval::{error_ratio, kernel_similarity, EvalRecord, EvalReport};
use msls::io::{load_image, load_kernel, save_image, save_kernel, ColorMode};
use msls::nonblind::tv_deblur;
use msls::nonuniform::nu_blind_deblur_with;
use msls::pipeline::{blind_deblur_with, RunOptions, Snapshot, UniformModel};
use msls::pyramid::{build_schedule, delta_distance, downsample_kernel, lowpass_downsample};
use msls::scenes::{render, SceneKind};
use msls::synth::{random_walk_kernel, synth_blur, SyntheticBlurSpec};
use msls::{convolve2d, Boundary, DeblurConfig, Image, Kernel};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "msls", version, about = "Blind image deblurring with a multi-scale latent structure prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Blind deblurring with a spatially uniform kernel.
    Deblur(DeblurArgs),
    /// Blind deblurring with a pose-basis (spatially varying) blur model.
    DeblurNu(DeblurNuArgs),
    /// Non-blind TV deconvolution with a known kernel.
    Nonblind(NonblindArgs),
    /// Generate a blurry benchmark set from sharp images and kernels.
    Synth(SynthArgs),
    /// Error-ratio report over a directory of benchmark triples.
    Eval(EvalArgs),
    /// Kernel down-sampling and commutation curves as CSV.
    Claim1(Claim1Args),
    /// Print the pyramid plan as JSON.
    Schedule(ScheduleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Channels {
    Luma,
    Rgb,
}

impl Channels {
    fn mode(self) -> ColorMode {
        match self {
            Channels::Luma => ColorMode::Luma,
            Channels::Rgb => ColorMode::Rgb,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Odd kernel support at full resolution.
    #[arg(long)]
    kernel_size: Option<usize>,
    /// JSON file overriding configuration defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Write the per-iteration trace as CSV.
    #[arg(long)]
    trace: bool,
    #[arg(long, value_enum, default_value = "luma")]
    channels: Channels,
    /// Dump intermediate images into `<out-dir>/snapshots`.
    #[arg(long)]
    snapshots: bool,
}

impl Common {
    fn config(&self) -> Result<DeblurConfig> {
        let mut cfg = match &self.config {
            Some(p) => DeblurConfig::load(p)?,
            None => DeblurConfig::default(),
        };
        if let Some(h) = self.kernel_size {
            cfg.kernel_size = h;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DeblurArgs {
    input: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DeblurNuArgs {
    input: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Rotations span +-this many degrees.
    #[arg(long)]
    rotation_extent: Option<f64>,
    /// Odd number of rotation samples.
    #[arg(long)]
    rotation_steps: Option<usize>,
    /// Translation spacing in pixels.
    #[arg(long)]
    translation_step: Option<f64>,
    /// JSON list of 3x3 row-major homographies replacing the grid.
    #[arg(long)]
    homographies: Option<PathBuf>,
    /// Regions per side of the rendered kernel grid.
    #[arg(long, default_value_t = 4)]
    regions: usize,
}

#[derive(Args)]
struct NonblindArgs {
    input: PathBuf,
    /// Kernel as plain text or image.
    #[arg(long)]
    kernel: PathBuf,
    /// TV weight; defaults to the configured value.
    #[arg(long)]
    mu: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    /// Sharp input images. Without any, built-in scenes are rendered.
    sharp: Vec<PathBuf>,
    /// Kernel files. Without any, random-walk kernels are drawn.
    #[arg(long, num_args = 1..)]
    kernels: Vec<PathBuf>,
    /// Supports of the drawn random-walk kernels.
    #[arg(long, value_delimiter = ',', default_value = "15,19,23,27")]
    kernel_sizes: Vec<usize>,
    /// Number of built-in scenes to render.
    #[arg(long, default_value_t = 5)]
    scenes: usize,
    /// Side of the rendered scenes.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Noise standard deviation in intensity units.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<name>.sharp.png`, `<name>.blur.png`, `<name>.kernel.txt`.
    dir: PathBuf,
    /// Directory of estimated `<name>.kernel.txt`; kernels are estimated blind when absent.
    #[arg(long)]
    estimates: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Claim1Args {
    /// Kernel file; otherwise a Gaussian or random-walk kernel is generated.
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Gaussian standard deviation of the generated kernel.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    /// Generate a random-walk kernel instead of a Gaussian.
    #[arg(long)]
    random_walk: bool,
    #[arg(long, default_value_t = 13)]
    kernel_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image for the commutation curve; a built-in scene otherwise.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Ratio between consecutive down-sampling factors.
    #[arg(long, default_value_t = 1.584962500721156)]
    step: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Read the dimensions from this image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("output").to_string()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn save_snapshots(dir: &Path, snaps: &[Snapshot<f64>]) -> Result<()> {
    let dir = dir.join("snapshots");
    fs::create_dir_all(&dir)?;
    for s in snaps {
        save_image(dir.join(format!("{}.png", s.name)), &s.image)?;
    }
    Ok(())
}

fn deblur(args: &DeblurArgs) -> Result<()> {
    let cfg = args.common.config()?;
    let b: Image = load_image(&args.input, args.common.channels.mode())?;
    let opts = RunOptions { keep_snapshots: args.common.snapshots };
    let out = blind_deblur_with(&UniformModel { cfg: &cfg }, &b, &cfg, &opts)?;
    let dir = &args.common.out_dir;
    fs::create_dir_all(dir)?;
    let name = stem(&args.input);
    save_image(dir.join(format!("{name}.deblurred.png")), &out.latent)?;
    save_kernel(dir.join(format!("{name}.kernel.txt")), out.kernel())?;
    save_kernel(dir.join(format!("{name}.kernel.png")), out.kernel())?;
    if args.common.trace {
        write(&dir.join(format!("{name}.trace.csv")), &out.trace_csv())?;
    }
    if args.common.snapshots {
        save_snapshots(dir, &out.snapshots)?;
    }
    eprintln!("{name}: kernel {}x{}, {:.2} s", cfg.kernel_size, cfg.kernel_size, out.timings.total().as_secs_f64());
    Ok(())
}

fn deblur_nu(args: &DeblurNuArgs) -> Result<()> {
    let mut cfg = args.common.config()?;
    if let Some(v) = args.rotation_extent {
        cfg.pose.rotation_extent_deg = v;
    }
    if let Some(v) = args.rotation_steps {
        cfg.pose.rotation_steps = v;
    }
    if let Some(v) = args.translation_step {
        cfg.pose.translation_step = v;
    }
    if let Some(p) = &args.homographies {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.pose.homographies = Some(serde_json::from_str(&text).context("homographies must be a list of 3x3 matrices")?);
    }
    cfg.validate()?;
    let b: Image = load_image(&args.input, args.common.channels.mode())?;
    let opts = RunOptions { keep_snapshots: args.common.snapshots };
    let out = nu_blind_deblur_with(&b, &cfg, &opts)?;
    let dir = &args.common.out_dir;
    fs::create_dir_all(dir)?;
    let name = stem(&args.input);
    save_image(dir.join(format!("{name}.deblurred.png")), &out.latent)?;
    write(&dir.join(format!("{name}.weights.json")), &out.blur.to_json())?;
    save_image(dir.join(format!("{name}.kernel-grid.png")), &out.blur.kernel_grid(args.regions))?;
    if args.common.trace {
        write(&dir.join(format!("{name}.trace.csv")), &out.trace_csv())?;
    }
    if args.common.snapshots {
        save_snapshots(dir, &out.snapshots)?;
    }
    eprintln!("{name}: {} poses, {:.2} s", out.blur.basis.len(), out.timings.total().as_secs_f64());
    Ok(())
}

fn nonblind(args: &NonblindArgs) -> Result<()> {
    let cfg = args.common.config()?;
    let b: Image = load_image(&args.input, args.common.channels.mode())?;
    let k: Kernel = load_kernel(&args.kernel)?;
    let x = tv_deblur(&b, &k, args.mu.unwrap_or(cfg.mu), &cfg.admm)?;
    fs::create_dir_all(&args.common.out_dir)?;
    save_image(args.common.out_dir.join(format!("{}.restored.png", stem(&args.input))), &x)?;
    Ok(())
}

struct SynthJob {
    name: String,
    image: usize,
    kernel: usize,
    noise_seed: u64,
}

fn synth(args: &SynthArgs) -> Result<()> {
    let sharp: Vec<(String, Image)> = if args.sharp.is_empty() {
        (0..args.scenes)
            .map(|i| {
                let kind = SceneKind::ALL[i % SceneKind::ALL.len()];
                let seed = args.seed.wrapping_add(i as u64);
                (format!("{}{i}", kind.name()), render(kind, args.size, args.size, seed))
            })
            .collect()
    } else {
        args.sharp.iter().map(|p| Ok((stem(p), load_image(p, ColorMode::Luma)?))).collect::<Result<_>>()?
    };
    let kernels: Vec<Kernel> = if args.kernels.is_empty() {
        args.kernel_sizes
            .iter()
            .enumerate()
            .map(|(j, &h)| {
                if h < 3 || h % 2 == 0 {
                    bail!("kernel size {h} must be odd and >= 3");
                }
                Ok(random_walk_kernel(h, args.seed.wrapping_mul(1000).wrapping_add(j as u64)))
            })
            .collect::<Result<_>>()?
    } else {
        args.kernels.iter().map(|p| Ok(load_kernel(p)?)).collect::<Result<_>>()?
    };
    fs::create_dir_all(&args.out_dir)?;
    let jobs: Vec<SynthJob> = (0..sharp.len())
        .flat_map(|i| (0..kernels.len()).map(move |j| (i, j)))
        .map(|(i, j)| SynthJob {
            name: format!("{}-k{j}", sharp[i].0),
            image: i,
            kernel: j,
            noise_seed: args.seed.wrapping_mul(1_000_003).wrapping_add((i * kernels.len() + j) as u64),
        })
        .collect();
    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let x = &sharp[job.image].1;
        let spec = SyntheticBlurSpec { kernel: kernels[job.kernel].clone(), noise_sigma: args.noise, seed: job.noise_seed };
        let b = synth_blur(x, &spec)?;
        save_image(args.out_dir.join(format!("{}.sharp.png", job.name)), x)?;
        save_image(args.out_dir.join(format!("{}.blur.png", job.name)), &b)?;
        save_kernel(args.out_dir.join(format!("{}.kernel.txt", job.name)), &spec.kernel)?;
        Ok(())
    })?;
    eprintln!("wrote {} instances to {}", jobs.len(), args.out_dir.display());
    Ok(())
}

fn eval_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let file = entry?.file_name();
        if let Some(name) = file.to_str().and_then(|f| f.strip_suffix(".sharp.png")) {
            if dir.join(format!("{name}.blur.png")).exists() && dir.join(format!("{name}.kernel.txt")).exists() {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    if names.is_empty() {
        bail!("no <name>.sharp.png / .blur.png / .kernel.txt triples in {}", dir.display());
    }
    Ok(names)
}

fn eval_one(dir: &Path, name: &str, estimates: Option<&Path>, cfg: &DeblurConfig, fixed_size: bool) -> Result<(EvalRecord, Kernel)> {
    let x: Image = load_image(dir.join(format!("{name}.sharp.png")), ColorMode::Luma)?;
    let b: Image = load_image(dir.join(format!("{name}.blur.png")), ColorMode::Luma)?;
    let k: Kernel = load_kernel(dir.join(format!("{name}.kernel.txt")))?;
    let start = Instant::now();
    let k_hat: Kernel = match estimates {
        Some(e) => load_kernel(e.join(format!("{name}.kernel.txt")))?,
        None => {
            let mut cfg = cfg.clone();
            if !fixed_size {
                cfg.kernel_size = k.size();
            }
            blind_deblur_with(&UniformModel { cfg: &cfg }, &b, &cfg, &RunOptions::default())?.blur
        }
    };
    let x_khat = tv_deblur(&b, &k_hat, cfg.mu, &cfg.admm)?;
    let x_k = tv_deblur(&b, &k, cfg.mu, &cfg.admm)?;
    let r = error_ratio(&x, &x_khat, &x_k)?;
    let record = EvalRecord {
        name: name.to_string(),
        error_ratio: r.value,
        ratio_floored: r.floored,
        kernel_similarity: kernel_similarity(&k_hat, &k),
        psnr: x_khat.psnr(&x)?,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, k_hat))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.common.config()?;
    let names = eval_names(&args.dir)?;
    let fixed = args.common.kernel_size.is_some();
    let results: Vec<(EvalRecord, Kernel)> = names
        .par_iter()
        .map(|n| eval_one(&args.dir, n, args.estimates.as_deref(), &cfg, fixed).with_context(|| format!("instance {n}")))
        .collect::<Result<_>>()?;
    let dir = &args.common.out_dir;
    fs::create_dir_all(dir)?;
    if args.estimates.is_none() {
        let kdir = dir.join("kernels");
        fs::create_dir_all(&kdir)?;
        for (r, k) in &results {
            save_kernel(kdir.join(format!("{}.kernel.txt", r.name)), k)?;
        }
    }
    let report = EvalReport { records: results.into_iter().map(|(r, _)| r).collect() };
    write(&dir.join("report.csv"), &report.to_csv())?;
    let summary = serde_json::to_string_pretty(&report.summary())?;
    write(&dir.join("summary.json"), &summary)?;
    emit(&format!("{summary}\n"))?;
    Ok(())
}

fn claim1(args: &Claim1Args) -> Result<()> {
    let k: Kernel = match &args.kernel {
        Some(p) => load_kernel(p)?,
        None if args.kernel_size.is_multiple_of(2) || args.kernel_size < 3 => {
            bail!("kernel size {} must be odd and >= 3", args.kernel_size)
        }
        None if args.random_walk => random_walk_kernel(args.kernel_size, args.seed),
        None => Kernel::gaussian(args.kernel_size, args.sigma),
    };
    if !(args.step > 1.0) {
        bail!("--step must be > 1");
    }
    let x: Image = match &args.image {
        Some(p) => load_image(p, ColorMode::Luma)?,
        None => render(SceneKind::Landscape, 512, 512, args.seed),
    };
    let b = convolve2d(&x, &k, Boundary::Replicate)?;
    let (lo, hi) = x.min_max();
    let range = (hi - lo).max(f64::EPSILON);
    let h = k.size() as f64;
    let mut alphas = Vec::new();
    let mut a = 1.0;
    while a < h {
        alphas.push(a);
        a *= args.step;
    }
    alphas.push(h);
    let rows: Vec<String> = alphas
        .par_iter()
        .map(|&alpha| -> Result<String> {
            let ka = downsample_kernel(&k, alpha);
            let err = lowpass_downsample(&b, alpha)?.zip_map(&lowpass_downsample(&x, alpha)?, |p, q| (p - q).abs())?.mean() / range;
            Ok(format!("{alpha},{},{},{}", ka.size(), delta_distance(&ka), err))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("alpha,kernel_size,delta_distance,commutation_error\n");
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    match &args.out {
        Some(p) => write(p, &csv)?,
        None => emit(&csv)?,
    }
    Ok(())
}

fn schedule(args: &ScheduleArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => DeblurConfig::load(p)?,
        None => DeblurConfig::default(),
    };
    let (w, h) = match (&args.image, args.width, args.height) {
        (Some(p), _, _) => load_image::<f64>(p, ColorMode::Luma)?.dims(),
        (None, Some(w), Some(h)) => (w, h),
        _ => bail!("give --image or both --width and --height"),
    };
    let s = build_schedule(w, h, args.kernel_size.unwrap_or(cfg.kernel_size), cfg.beta, cfg.min_coarse_dim)?;
    emit(&format!("{}\n", s.to_json()))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Deblur(a) => deblur(a),
        Command::DeblurNu(a) => deblur_nu(a),
        Command::Nonblind(a) => nonblind(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Claim1(a) => claim1(a),
        Command::Schedule(a) => schedule(a),
    }
}

/// 2 for bad input, 3 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|c| c.downcast_ref::<msls::Error>()) {
        Some(e) if !e.is_input_error() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("MSLS_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: MSLS_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&anyhow::Error::new(msls::Error::AdmmDiverged)), 3);
        assert_eq!(exit_code(&anyhow::Error::new(msls::Error::NonUniformNotConverged).context("instance a")), 3);
        assert_eq!(exit_code(&anyhow::Error::new(msls::Error::EmptyImage)), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("bad flag")), 2);
    }
}
