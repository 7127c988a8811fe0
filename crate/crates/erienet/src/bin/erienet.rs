//! Command-line front end: enhancement, toy training, complexity
//! reports, benchmarks, gradient checks, metrics, and entropy.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use erienet::bayer::{
    self, amplify, amplify_ratio, channel_entropy, extract_green, load_image, load_mosaic,
    pack, save_image, RawMosaic,
};
use erienet::check;
use erienet::loss::{psnr, ssim};
use erienet::model::{
    benchmark, build, flop_count, manifest, param_count, BlockVariant, Guidance, ModelConfig,
};
use erienet::train::{
    load_checkpoint, save_checkpoint, synthetic_dataset, ToySample, Trainer,
};
use erienet::{Error, Result};

#[derive(Parser)]
#[command(name = "erienet", about = "Low-light RAW enhancement toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigFlags {
    /// Comma-separated branch scales, e.g. "16,8,4" or "16".
    #[arg(long, default_value = "16,8,4")]
    scales: String,
    #[arg(long, default_value = "gcg_bn")]
    guidance: Guidance,
    #[arg(long, default_value = "crdb")]
    block: BlockVariant,
    /// Use the reduced-width test configuration.
    #[arg(long)]
    tiny: bool,
}

impl ConfigFlags {
    fn build(&self) -> Result<ModelConfig> {
        let mut cfg = if self.tiny { ModelConfig::tiny() } else { ModelConfig::default() };
        let mut scales = Vec::new();
        for part in self.scales.split(',') {
            let s: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::invalid("cli", format!("bad scale `{part}`")))?;
            scales.push(s);
        }
        cfg.scales = scales;
        cfg.guidance = self.guidance;
        cfg.block_variant = self.block;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Enhance a dark RAW mosaic into an RGB image.
    Enhance {
        /// 16-bit PGM mosaic (expects a JSON sidecar next to it).
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        weights: PathBuf,
        /// Output PPM path.
        #[arg(long)]
        output: PathBuf,
        /// Amplification ratio, or "auto" to derive it from the sidecar.
        #[arg(long, default_value = "auto")]
        ratio: String,
        /// Ground-truth PPM; prints PSNR/SSIM against it.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train on synthetic data or a directory of mosaic/reference pairs.
    Train {
        /// Directory of <stem>.pgm + <stem>.json + <stem>.ppm triples.
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Use the built-in seeded synthetic dataset.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Print the per-layer manifest with parameter and FLOP totals.
    Report {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Measure eval-mode throughput.
    Bench {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Run the 64-bit gradient-check suite; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR/SSIM between two PPM images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Per-channel Shannon entropy of a packed mosaic.
    Entropy {
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    init_threads();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("ERIENET_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Enhance { input, weights, output, ratio, reference } => {
            cmd_enhance(&input, &weights, &output, &ratio, reference.as_deref())?
        }
        Cmd::Train { data, synthetic, steps, seed, out, config } => {
            cmd_train(data.as_deref(), synthetic, steps, seed, &out, &config)?
        }
        Cmd::Report { height, width, config } => cmd_report(height, width, &config)?,
        Cmd::Bench { height, width, repeats, seed, config } => {
            cmd_bench(height, width, repeats, seed, &config)?
        }
        Cmd::Gradcheck { seed } => return cmd_gradcheck(seed),
        Cmd::Metrics { a, b } => cmd_metrics(&a, &b)?,
        Cmd::Entropy { input } => cmd_entropy(&input)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Largest centered sub-mosaic with dims divisible by 32. Offsets stay
/// even so the CFA phase is preserved.
fn center_crop_mosaic(m: &RawMosaic) -> Result<RawMosaic> {
    let (ch, cw) = (m.height / 32 * 32, m.width / 32 * 32);
    if ch == 0 || cw == 0 {
        return Err(Error::shape(
            "enhance",
            format!("mosaic {}x{} is smaller than 32x32", m.height, m.width),
        ));
    }
    if (ch, cw) == (m.height, m.width) {
        return Ok(m.clone());
    }
    let (oy, ox) = (((m.height - ch) / 2) & !1, ((m.width - cw) / 2) & !1);
    eprintln!(
        "note: mosaic {}x{} not divisible by 32; center-cropping to {}x{} at offset ({}, {})",
        m.height, m.width, ch, cw, oy, ox
    );
    let mut data = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        let row = (oy + y) * m.width + ox;
        data.extend_from_slice(&m.data[row..row + cw]);
    }
    let mut out = RawMosaic::new(cw, ch, data, m.white_level)?;
    out.black_level = m.black_level;
    Ok(out)
}

fn cmd_enhance(
    input: &Path,
    weights: &Path,
    output: &Path,
    ratio: &str,
    reference: Option<&Path>,
) -> Result<()> {
    let (mosaic, meta) = load_mosaic(input)?;
    let mosaic = center_crop_mosaic(&mosaic)?;
    let packed = pack(&mosaic)?;
    let packed = if ratio == "auto" {
        amplify(&packed, &meta)?
    } else {
        let r: f64 = ratio
            .parse()
            .map_err(|_| Error::invalid("cli", format!("bad --ratio `{ratio}`")))?;
        amplify_ratio(&packed, r)?
    };

    let cp = load_checkpoint(weights)?;
    let mut params = cp.params;
    let img = erienet::model::enhance(
        &mut params,
        &cp.config,
        &packed.to_tensor::<f32>(),
        &extract_green::<f32>(&packed),
    )?;
    save_image(&img, output)?;

    if let Some(refpath) = reference {
        let gt = load_image::<f32>(refpath)?;
        let p = psnr(&img, &gt, 1.0)?;
        let s = ssim(&img, &gt, 1.0)?;
        println!("PSNR: {p} dB, SSIM: {s}");
    }
    Ok(())
}

fn load_dataset_dir(dir: &Path) -> Result<Vec<ToySample>> {
    let pstr = dir.display().to_string();
    let mut stems: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(&pstr, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::invalid("train", format!("no .pgm files in {pstr}")));
    }
    let mut data = Vec::new();
    for pgm in stems {
        let (mosaic, meta) = load_mosaic(&pgm)?;
        let packed = amplify(&pack(&mosaic)?, &meta)?;
        let target = load_image::<f32>(pgm.with_extension("ppm"))?;
        data.push((packed, target));
    }
    Ok(data)
}

fn cmd_train(
    data: Option<&Path>,
    synthetic: bool,
    steps: usize,
    seed: u64,
    out: &Path,
    flags: &ConfigFlags,
) -> Result<()> {
    let cfg = flags.build()?;
    let samples = match (data, synthetic) {
        (Some(dir), false) => load_dataset_dir(dir)?,
        (None, true) => synthetic_dataset(16, 32, 32, 10.0, seed),
        _ => return Err(Error::invalid("train", "pass exactly one of --data or --synthetic")),
    };
    eprintln!("training {} steps on {} samples", steps, samples.len());
    let mut trainer = Trainer::new(cfg, seed)?;
    let trace = trainer.train(&samples, steps)?;
    println!("step,loss");
    for (i, l) in trace.iter().enumerate() {
        println!("{},{}", i + 1, l);
    }
    save_checkpoint(out, &trainer.to_checkpoint())?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_report(height: usize, width: usize, flags: &ConfigFlags) -> Result<()> {
    let cfg = flags.build()?;
    let layers = manifest(&cfg, height, width)?;
    let total_flops = flop_count(&cfg, height, width)?;
    let total_params = param_count(&build::<f32>(&cfg, 0)?);
    let report = json!({
        "mosaic_height": height,
        "mosaic_width": width,
        "config": cfg,
        "layers": layers,
        "total_params": total_params,
        "total_flops": total_flops,
        "params_m": total_params as f64 / 1e6,
        "gflops": total_flops as f64 / 1e9,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_bench(
    height: usize,
    width: usize,
    repeats: usize,
    seed: u64,
    flags: &ConfigFlags,
) -> Result<()> {
    let cfg = flags.build()?;
    let mut params = build::<f32>(&cfg, seed)?;
    let r = benchmark(&mut params, &cfg, height, width, repeats)?;
    println!("{}", serde_json::to_string_pretty(&r).expect("bench report serializes"));
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode> {
    let results = check::full_suite(seed)?;
    let rows: Vec<_> = results
        .iter()
        .map(|r| {
            json!({
                "name": r.name,
                "max_rel_err": r.max_rel_err,
                "tol": r.tol,
                "coords": r.coords,
                "pass": r.passed(),
            })
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    let failures: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &failures {
            eprintln!("gradcheck failed: {} ({} >= {})", f.name, f.max_rel_err, f.tol);
        }
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_metrics(a: &Path, b: &Path) -> Result<()> {
    let x = load_image::<f32>(a)?;
    let y = load_image::<f32>(b)?;
    let p = psnr(&x, &y, 1.0)?;
    let s = ssim(&x, &y, 1.0)?;
    println!("PSNR: {p} dB, SSIM: {s}");
    Ok(())
}

fn cmd_entropy(input: &Path) -> Result<()> {
    let (mosaic, _) = load_mosaic(input)?;
    let packed = pack(&mosaic)?;
    let plane = packed.height * packed.width;
    let names = ["R", "G1", "G2", "B"];
    let mut channels = serde_json::Map::new();
    for (c, name) in names.iter().enumerate() {
        let h = channel_entropy(&packed.data[c * plane..(c + 1) * plane], 256)?;
        channels.insert(
            name.to_string(),
            json!({ "entropy_bits": h, "green": c == bayer::CH_G1 || c == bayer::CH_G2 }),
        );
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::Value::Object(channels))
            .expect("entropy report serializes")
    );
    Ok(())
}
