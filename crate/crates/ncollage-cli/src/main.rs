//! `ncollage` — fractal image codec frontend.
//!
//! Every subcommand prints exactly one line of JSON to stdout on success.
//! Exit codes: 0 success, 2 bad arguments or shapes, 3 unreadable or
//! malformed files, 4 numerical failures (non-contractive operator,
//! singular solve).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ncollage::{
    block_dct_decode, block_dct_encode, ct_bound, dct_bpp, encode_blockwise, encode_collage_gd,
    encode_collage_ls, encode_pifs, fractalize_encode, mse, psnr, run_bench, BenchConfig,
    BenchMethod, Code, CodeContainer, DecodeInit, EncodeMethod, EncoderConfig, Error,
    PartitionScheme, QuantizationSpec, RasterImage, SolveConfig, SolveMode,
};

#[derive(Parser)]
#[command(name = "ncollage", version, about = "Self-referential image codec")]
struct Cli {
    /// Worker threads (overrides the NCOLLAGE_THREADS environment variable;
    /// default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a code to an image and write the container.
    Encode(EncodeArgs),
    /// Reconstruct an image from a container.
    Decode(DecodeArgs),
    /// Fit a square image from one whole-image domain and render the
    /// attractor at the requested magnifications.
    Fractalize(FractalizeArgs),
    /// DC-only block transform roundtrip (rate/quality baseline).
    Dct(DctArgs),
    /// Peak signal-to-noise ratio between two images.
    Psnr(PsnrArgs),
    /// Compare methods on one image or every image in a directory.
    Bench(BenchArgs),
    /// Summarize a container without decoding it.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Pifs,
    Collage,
}

#[derive(Args)]
struct SchemeArgs {
    /// Range cell side length.
    #[arg(long, default_value_t = 8)]
    range: usize,
    /// Domain cell side length (a multiple of the range size).
    #[arg(long, default_value_t = 16)]
    domain: usize,
    /// Domain grid stride.
    #[arg(long, default_value_t = 16)]
    stride: usize,
}

impl SchemeArgs {
    fn build(&self) -> Result<PartitionScheme, Error> {
        PartitionScheme::new(self.range, self.domain, self.stride)
    }
}

#[derive(Args)]
struct EncoderArgs {
    /// Include rotated and negated domain variants.
    #[arg(long)]
    augment: bool,
    /// Contrast cap in (0, 1). Default: 0.999 for search codes, 0.9 for
    /// gradient-trained collage codes (a tighter contraction decodes faster).
    #[arg(long)]
    a_max: Option<f64>,
    /// Ridge / L2 regularization weight.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Gradient refinement steps (0 disables refinement).
    #[arg(long, default_value_t = 200)]
    gd_steps: usize,
    /// Initial gradient step size.
    #[arg(long, default_value_t = 0.05)]
    gd_rate: f64,
    /// Learned auxiliary patches (collage method only).
    #[arg(long, default_value_t = 3)]
    aux: usize,
    /// Seed for auxiliary patch initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EncoderArgs {
    fn build(&self, for_pifs: bool) -> EncoderConfig {
        EncoderConfig {
            use_augmentations: self.augment,
            a_max: self.a_max.unwrap_or(if for_pifs { 0.999 } else { 0.9 }),
            ridge_lambda: self.lambda,
            gd_steps: self.gd_steps,
            gd_rate: self.gd_rate,
            aux_count: if for_pifs { 0 } else { self.aux },
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    /// Input image (binary PGM or PPM).
    #[arg(long)]
    input: PathBuf,
    /// Output container path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Collage)]
    method: MethodArg,
    /// Encode independent square blocks of this size (0: whole image).
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Coefficient precision in decimal digits (collage method).
    #[arg(long, default_value_t = 3)]
    epsilon: u8,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args)]
struct DecodeArgs {
    /// Input container path.
    #[arg(long)]
    input: PathBuf,
    /// Output image (PGM for 1 channel, PPM for 3).
    #[arg(long)]
    output: PathBuf,
    /// Integer magnification factor.
    #[arg(long, default_value_t = 1)]
    scale: usize,
    /// Sup-norm step tolerance for fixed-point iteration.
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Solve the fixed point directly instead of iterating.
    #[arg(long)]
    closed_form: bool,
    /// Starting image: "zeros" or "constant:<value>".
    #[arg(long, default_value = "zeros")]
    init: String,
    /// Decode even when the operator is not certified contractive; the
    /// result is whatever the capped iteration produces.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FractalizeArgs {
    /// Input image (binary PGM, square).
    #[arg(long)]
    input: PathBuf,
    /// Output container path; decoded renders land next to it as
    /// `<stem>.x<scale>.pgm`.
    #[arg(long)]
    output: PathBuf,
    /// Range cell side length.
    #[arg(long, default_value_t = 8)]
    range: usize,
    /// Coefficient precision in decimal digits.
    #[arg(long, default_value_t = 3)]
    epsilon: u8,
    /// Comma-separated integer magnifications to render, e.g. "1,2,4".
    #[arg(long, default_value = "1")]
    scales: String,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args)]
struct DctArgs {
    #[arg(long)]
    input: PathBuf,
    /// Reconstruction output (optional).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    patch: usize,
}

#[derive(Args)]
struct PsnrArgs {
    /// Reference image.
    #[arg(long)]
    reference: PathBuf,
    /// Image under test.
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// One image, or a directory whose .pgm/.ppm files are all benchmarked.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated subset of: pifs, pifs-aug, collage, block-dct.
    #[arg(long, default_value = "pifs,pifs-aug,collage,block-dct")]
    methods: String,
    /// Write rows as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the full report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Encode independent square blocks of this size (0: whole image).
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Coefficient precision for the collage method.
    #[arg(long, default_value_t = 3)]
    epsilon: u8,
    /// Patch size for the transform baseline.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Timing repeats per phase (median reported).
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
}

fn parse_init(text: &str) -> Result<DecodeInit, Error> {
    if text == "zeros" {
        return Ok(DecodeInit::Zeros);
    }
    if let Some(v) = text.strip_prefix("constant:") {
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Argument(format!("bad constant init value {v:?}")))?;
        return Ok(DecodeInit::Constant(v));
    }
    Err(Error::Argument(format!(
        "init must be \"zeros\" or \"constant:<value>\", got {text:?}"
    )))
}

fn parse_methods(text: &str) -> Result<Vec<BenchMethod>, Error> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "pifs" => Ok(BenchMethod::Pifs),
            "pifs-aug" => Ok(BenchMethod::PifsAugmented),
            "collage" => Ok(BenchMethod::Collage),
            "block-dct" => Ok(BenchMethod::BlockDct),
            other => Err(Error::Argument(format!("unknown method {other:?}"))),
        })
        .collect()
}

fn parse_scales(text: &str) -> Result<Vec<usize>, Error> {
    let mut scales = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let s: usize = part
            .parse()
            .map_err(|_| Error::Argument(format!("bad magnification {part:?}")))?;
        if s == 0 {
            return Err(Error::Argument("magnification must be at least 1".into()));
        }
        if !scales.contains(&s) {
            scales.push(s);
        }
    }
    if scales.is_empty() {
        return Err(Error::Argument("no magnifications requested".into()));
    }
    Ok(scales)
}

fn container_lipschitz(container: &CodeContainer) -> (f64, bool) {
    use ncollage::FixedPointOp;
    let mut worst = 0.0f64;
    let mut contractive = true;
    for code in container.codes() {
        let report = code.lipschitz();
        worst = worst.max(report.bound);
        contractive &= report.contractive;
    }
    (worst, contractive)
}

/// Worst-case fixed-point certificate over the container's blocks: how far
/// the attractor can sit from the encoded image, in sup norm.
fn container_certificate(
    container: &CodeContainer,
    x: &RasterImage,
) -> Result<serde_json::Value, Error> {
    let (w, h, _) = x.dims();
    let block = container.block_size();
    // block_size 0 means one whole-image code.
    let grid_w = w.checked_div(block).unwrap_or(1);
    let (bw, bh) = if block == 0 { (w, h) } else { (block, block) };
    let mut collage_error = 0.0f64;
    let mut lipschitz = 0.0f64;
    let mut bound = 0.0f64;
    for (i, code) in container.codes().iter().enumerate() {
        let (bx, by) = (i % grid_w, i / grid_w);
        let tile = if block == 0 { x.clone() } else { x.crop(bx * bw, by * bh, bw, bh)? };
        let ct = ct_bound(code, &tile)?;
        collage_error = collage_error.max(ct.collage_error);
        lipschitz = lipschitz.max(ct.lipschitz_bound);
        bound = bound.max(ct.bound);
    }
    Ok(json!({
        "collage_error": collage_error,
        "lipschitz": lipschitz,
        "attractor_distance_bound": bound,
    }))
}

fn cmd_encode(args: &EncodeArgs) -> Result<serde_json::Value, Error> {
    let x = RasterImage::load_pnm(&args.input)?;
    let scheme = args.scheme.build()?;
    let for_pifs = args.method == MethodArg::Pifs;
    let cfg = args.encoder.build(for_pifs);
    let method = match args.method {
        MethodArg::Pifs => EncodeMethod::Pifs,
        MethodArg::Collage => EncodeMethod::Collage,
    };
    let (codes, surrogate) = if args.block == 0 {
        match method {
            EncodeMethod::Pifs => {
                let (code, rep) = encode_pifs(&x, &scheme, &cfg)?;
                (vec![Code::Pifs(code)], rep.surrogate_loss)
            }
            EncodeMethod::Collage => {
                let (ls, rep) = encode_collage_ls(&x, &scheme, &cfg)?;
                if cfg.gd_steps == 0 {
                    (vec![Code::Collage(ls)], rep.surrogate_loss)
                } else {
                    let (gd, gd_rep) = encode_collage_gd(&x, &ls, &cfg)?;
                    (vec![Code::Collage(gd)], gd_rep.surrogate_final)
                }
            }
        }
    } else {
        let (codes, rep) = encode_blockwise(&x, args.block, &scheme, &cfg, method)?;
        (codes, rep.surrogate_loss)
    };
    let quant = if for_pifs { None } else { Some(QuantizationSpec::new(args.epsilon)?) };
    let (w, h, c) = x.dims();
    let container = CodeContainer::new(w, h, c, args.block, codes, quant)?;
    container.save(&args.output)?;
    let rate = container.bpp();
    let (lipschitz, contractive) = container_lipschitz(&container);
    let certificate = container_certificate(&container, &x)?;
    log::info!(
        "encoded {} -> {} ({:.4} bpp)",
        args.input.display(),
        args.output.display(),
        rate.bpp
    );
    Ok(json!({
        "command": "encode",
        "input": args.input,
        "output": args.output,
        "method": if for_pifs { "pifs" } else { "collage" },
        "width": w,
        "height": h,
        "channels": c,
        "block": args.block,
        "codes": container.codes().len(),
        "surrogate_loss": surrogate,
        "lipschitz": lipschitz,
        "contractive": contractive,
        "certificate": certificate,
        "total_bits": rate.total_bits,
        "bpp": rate.bpp,
    }))
}

fn cmd_decode(args: &DecodeArgs) -> Result<serde_json::Value, Error> {
    let container = CodeContainer::load(&args.input)?;
    let cfg = SolveConfig {
        mode: if args.closed_form { SolveMode::ClosedForm } else { SolveMode::Iterate },
        tolerance: args.tolerance,
        max_iters: args.max_iters,
        init: parse_init(&args.init)?,
        allow_noncontractive: args.force,
    };
    let (z, reports) = if args.scale == 1 {
        container.decode(&cfg)?
    } else {
        container.decode_scaled(args.scale, &cfg)?
    };
    z.save_pnm(&args.output)?;
    let (w, h, c) = z.dims();
    Ok(json!({
        "command": "decode",
        "input": args.input,
        "output": args.output,
        "width": w,
        "height": h,
        "channels": c,
        "scale": args.scale,
        "iterations": reports.iter().map(|r| r.iterations).max().unwrap_or(0),
        "final_step": reports.iter().map(|r| r.final_step).fold(0.0f64, f64::max),
        "lipschitz": reports.iter().map(|r| r.lipschitz_bound).fold(0.0f64, f64::max),
        "converged": reports.iter().all(|r| r.converged),
    }))
}

/// Sibling path for a decoded render: `out.nc` at scale 2 becomes
/// `out.x2.pgm` (or `.ppm` for three channels).
fn render_path(container_out: &Path, scale: usize, channels: usize) -> PathBuf {
    let stem = container_out.file_stem().and_then(|s| s.to_str()).unwrap_or("render");
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    container_out.with_file_name(format!("{stem}.x{scale}.{ext}"))
}

fn cmd_fractalize(args: &FractalizeArgs) -> Result<serde_json::Value, Error> {
    let scales = parse_scales(&args.scales)?;
    let x = RasterImage::load_pnm(&args.input)?;
    let cfg = args.encoder.build(false);
    let (code, rep) = fractalize_encode(&x, args.range, &cfg)?;
    let (w, h, c) = x.dims();
    let container = CodeContainer::new(
        w,
        h,
        c,
        0,
        vec![Code::Collage(code)],
        Some(QuantizationSpec::new(args.epsilon)?),
    )?;
    container.save(&args.output)?;
    let rate = container.bpp();
    let certificate = match container.codes() {
        [code] => {
            let bound = ct_bound(code, &x)?;
            json!({
                "collage_error": bound.collage_error,
                "lipschitz": bound.lipschitz_bound,
                "attractor_distance_bound": bound.bound,
            })
        }
        _ => unreachable!("fractalize writes one code"),
    };
    // Render the attractor at every requested magnification.
    let solve = SolveConfig { tolerance: 1e-9, max_iters: 2000, ..Default::default() };
    let mut renders = Vec::with_capacity(scales.len());
    for &scale in &scales {
        let (z, reports) = if scale == 1 {
            container.decode(&solve)?
        } else {
            container.decode_scaled(scale, &solve)?
        };
        let path = render_path(&args.output, scale, c);
        z.save_pnm(&path)?;
        let (zw, zh, _) = z.dims();
        renders.push(json!({
            "scale": scale,
            "path": path,
            "width": zw,
            "height": zh,
            "iterations": reports.iter().map(|r| r.iterations).max().unwrap_or(0),
            "converged": reports.iter().all(|r| r.converged),
        }));
    }
    Ok(json!({
        "command": "fractalize",
        "input": args.input,
        "output": args.output,
        "width": w,
        "height": h,
        "range": args.range,
        "surrogate_initial": rep.surrogate_initial,
        "surrogate_final": rep.surrogate_final,
        "gd_steps_taken": rep.steps_taken,
        "bpp": rate.bpp,
        "certificate": certificate,
        "renders": renders,
    }))
}

fn cmd_dct(args: &DctArgs) -> Result<serde_json::Value, Error> {
    let x = RasterImage::load_pnm(&args.input)?;
    let code = block_dct_encode(&x, args.patch)?;
    let z = block_dct_decode(&code)?;
    if let Some(out) = &args.output {
        z.save_pnm(out)?;
    }
    let (w, h, c) = x.dims();
    Ok(json!({
        "command": "dct",
        "input": args.input,
        "output": args.output,
        "width": w,
        "height": h,
        "channels": c,
        "patch": args.patch,
        "bpp": dct_bpp(w, h, c, args.patch)?,
        "psnr_db": psnr(&x, &z)?,
    }))
}

fn cmd_psnr(args: &PsnrArgs) -> Result<serde_json::Value, Error> {
    let a = RasterImage::load_pnm(&args.reference)?;
    let b = RasterImage::load_pnm(&args.test)?;
    Ok(json!({
        "command": "psnr",
        "reference": args.reference,
        "test": args.test,
        "mse": mse(&a, &b)?,
        "psnr_db": psnr(&a, &b)?,
    }))
}

/// Gather (id, image) pairs: a single file, or every .pgm/.ppm in a
/// directory, sorted by file name.
fn bench_inputs(input: &Path) -> Result<Vec<(String, RasterImage)>, Error> {
    let file_id = |p: &Path| {
        p.file_name().and_then(|n| n.to_str()).map(str::to_owned).unwrap_or_else(|| {
            p.display().to_string()
        })
    };
    if !std::fs::metadata(input)?.is_dir() {
        return Ok(vec![(file_id(input), RasterImage::load_pnm(input)?)]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!(
            "no .pgm/.ppm images in {}",
            input.display()
        )));
    }
    paths
        .iter()
        .map(|p| Ok((file_id(p), RasterImage::load_pnm(p)?)))
        .collect()
}

fn cmd_bench(args: &BenchArgs) -> Result<serde_json::Value, Error> {
    let images = bench_inputs(&args.input)?;
    let cfg = BenchConfig {
        methods: parse_methods(&args.methods)?,
        scheme: args.scheme.build()?,
        block_size: args.block,
        epsilon: args.epsilon,
        patch: args.patch,
        pifs: args.encoder.build(true),
        collage: args.encoder.build(false),
        solve: SolveConfig::default(),
        repeats: args.repeats,
    };
    let report = run_bench(&images, &cfg)?;
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv_string()?)?;
    }
    if let Some(path) = &args.json {
        std::fs::write(path, report.to_json_string()?)?;
    }
    serde_json::to_value(&report).map_err(|e| Error::Format(format!("cannot serialize: {e}")))
}

fn cmd_inspect(args: &InspectArgs) -> Result<serde_json::Value, Error> {
    let container = CodeContainer::load(&args.input)?;
    let (w, h, c) = container.dims();
    let rate = container.bpp();
    let (lipschitz, contractive) = container_lipschitz(&container);
    let first = match &container.codes()[0] {
        Code::Collage(code) => json!({
            "kind": "collage",
            "ranges": code.k,
            "domains": code.n,
            "aux_columns": code.v,
            "aux": if code.aux.is_rotations() { "rotations" } else { "patches" },
            "augmented": code.augmented,
            "range": code.scheme.range_size,
            "domain": code.scheme.domain_size,
            "stride": code.scheme.domain_stride,
        }),
        Code::Pifs(code) => json!({
            "kind": "pifs",
            "ranges": code.entries.len(),
            "augmented": code.augmented,
            "range": code.scheme.range_size,
            "domain": code.scheme.domain_size,
            "stride": code.scheme.domain_stride,
        }),
    };
    Ok(json!({
        "command": "inspect",
        "input": args.input,
        "width": w,
        "height": h,
        "channels": c,
        "block": container.block_size(),
        "codes": container.codes().len(),
        "epsilon": container.epsilon(),
        "code": first,
        "lipschitz": lipschitz,
        "contractive": contractive,
        "rate": rate,
    }))
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Argument(_) | Error::Partition(_) | Error::Shape(_) | Error::Size(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Contractivity(_) | Error::Numerical(_) => 4,
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, Error> {
    match &cli.command {
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Fractalize(args) => cmd_fractalize(args),
        Command::Dct(args) => cmd_dct(args),
        Command::Psnr(args) => cmd_psnr(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("NCOLLAGE_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: thread count must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
