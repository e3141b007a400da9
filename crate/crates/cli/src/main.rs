mod provenance;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ffbspca::basis::{build_basis, RadialTable};
use ffbspca::bench::{run_bench, write_bench_csv};
use ffbspca::denoise::{
    denoise_images, estimate_bandlimit, estimate_noise_variance, estimate_support, filter_weights, metrics,
    select_components, write_metrics_csv, DenoiseReport, NoiseModel, Shrinkage, DEFAULT_FRACTION,
};
use ffbspca::fbcoeff::{expand_with, read_fbc, reflect_coeffs, rotate_coeffs, write_fbc, ExpandOptions, FBCoeffs, PolarMethod, DEFAULT_BLOCK_SIZE};
use ffbspca::mrc::{read_mrc_with_labels, write_mrc};
use ffbspca::polarft::{make_polar_grid, DEFAULT_EPS};
use ffbspca::simulate::{
    add_noise, apply_ctf_envelope, apply_shifts, default_decay, disk_power, gen_bandlimited_stack, gen_noise_stack,
    CtfParams, PhantomOptions,
};
use ffbspca::spca::steerable_pca;
use ffbspca::{Error, ImageStack, Result};
use provenance::{file_sha256, Provenance};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ffbspca", version, about = "Fast Fourier-Bessel steerable PCA for stacks of square images")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a white-noise or phantom stack.
    Simulate(SimulateArgs),
    /// Estimate noise variance, support radius and band limit.
    EstimateParams(EstimateArgs),
    /// Fourier-Bessel expansion of an MRC stack.
    Expand(ExpandArgs),
    /// Steerable PCA of a coefficient file.
    Spca(SpcaArgs),
    /// Denoise an MRC stack.
    Denoise(DenoiseArgs),
    /// Rotate or reflect a coefficient file.
    Steer(SteerArgs),
    /// Time the expansion and PCA stages.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Noise,
    Phantom,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShrinkArg {
    Soft,
    Spiked,
}

impl From<ShrinkArg> for Shrinkage {
    fn from(s: ShrinkArg) -> Self {
        match s {
            ShrinkArg::Soft => Shrinkage::Soft,
            ShrinkArg::Spiked => Shrinkage::Spiked,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "phantom")]
    kind: Kind,
    /// Number of images.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Image side L.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Noise standard deviation (default 1 for noise, 0 for phantoms).
    #[arg(long, conflicts_with = "snr")]
    sigma: Option<f64>,
    /// Signal-to-noise ratio inside the support disk (phantoms only).
    #[arg(long)]
    snr: Option<f64>,
    /// Phantom band limit (cycles/pixel).
    #[arg(long, default_value_t = 0.3)]
    c: f64,
    /// Phantom support radius in pixels (default L/3).
    #[arg(long)]
    radius: Option<u32>,
    #[arg(long, default_value_t = 1)]
    classes: usize,
    /// Give every image a random in-plane rotation.
    #[arg(long)]
    rotate: bool,
    /// Apply the reference CTF envelope.
    #[arg(long)]
    ctf: bool,
    /// Pixel size in A.
    #[arg(long, default_value_t = 1.0)]
    pixel_size: f64,
    /// Largest random circular shift per axis, in pixels.
    #[arg(long, default_value_t = 0)]
    max_shift: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output MRC stack.
    #[arg(long)]
    out: PathBuf,
    /// Noise-free stack (after CTF and shifts).
    #[arg(long)]
    clean_out: Option<PathBuf>,
    /// Exact phantom coefficients (before CTF and shifts).
    #[arg(long)]
    coeffs_out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Energy fraction for the support and band-limit estimates.
    #[arg(long, default_value_t = DEFAULT_FRACTION)]
    fraction: f64,
    /// JSON report (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Basis parameters; missing values are estimated from the stack.
#[derive(Args)]
struct BasisArgs {
    /// Band limit in cycles/pixel.
    #[arg(long)]
    c: Option<f64>,
    /// Support radius in pixels.
    #[arg(long)]
    radius: Option<u32>,
    /// Noise variance.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Energy fraction for the estimates.
    #[arg(long, default_value_t = DEFAULT_FRACTION)]
    fraction: f64,
    /// NUFFT accuracy.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    /// Images per expansion batch.
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    /// Sample the polar grid by direct summation instead of the NUFFT.
    #[arg(long)]
    direct: bool,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    basis: BasisArgs,
    /// Output coefficient file (FBC1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpcaArgs {
    /// Coefficient file (FBC1).
    #[arg(long)]
    input: PathBuf,
    /// Output stem: writes <stem>.json and <stem>.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long, value_enum, default_value = "spiked")]
    shrinkage: ShrinkArg,
    /// Clean reference stack for MSE/PSNR.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Output MRC stack.
    #[arg(long)]
    out: PathBuf,
    /// JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-image metrics CSV (needs --clean).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Disk radius for the metrics (default: the basis radius).
    #[arg(long)]
    metrics_radius: Option<f64>,
}

#[derive(Args)]
struct SteerArgs {
    /// Coefficient file (FBC1).
    #[arg(long)]
    input: PathBuf,
    /// Rotation angle in radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    alpha: f64,
    /// Mirror (x, y) -> (-x, y) before rotating.
    #[arg(long)]
    reflect: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Image sides, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    sizes: Vec<usize>,
    /// Image counts, comma separated; the first is used for the size sweep.
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0.5)]
    c: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report (default: stdout).
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ffbspca: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration errors, 3 for malformed files, 1 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Index { .. } | Error::Shape(_) => 2,
        Error::Format { .. } | Error::Json(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::EstimateParams(a) => estimate_params(a),
        Command::Expand(a) => expand(a),
        Command::Spca(a) => spca(a),
        Command::Denoise(a) => denoise(a),
        Command::Steer(a) => steer(a),
        Command::Bench(a) => bench(a),
    }
}

fn read_stack(path: &Path) -> Result<(ImageStack, Vec<String>)> {
    read_mrc_with_labels(path)
}

fn read_coeffs(path: &Path) -> Result<FBCoeffs> {
    read_fbc(BufReader::new(File::open(path)?))
}

fn write_coeffs(coeffs: &FBCoeffs, path: &Path, prov: &Provenance) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fbc(coeffs, &mut w)?;
    w.flush()?;
    prov.write_sidecar(path)
}

/// Writes an MRC stack whose first label is the provenance line, followed by
/// the labels carried over from the input.
fn write_stack(stack: &ImageStack, path: &Path, prov: &Provenance, inherited: &[String]) -> Result<()> {
    let labels: Vec<String> = std::iter::once(prov.label()).chain(inherited.iter().cloned()).take(10).collect();
    write_mrc(stack, path, &labels)?;
    prov.write_sidecar(path)
}

#[derive(Serialize)]
struct SimulateConfig {
    kind: Kind,
    n: usize,
    size: usize,
    sigma: f64,
    snr: Option<f64>,
    c: Option<f64>,
    radius: Option<u32>,
    classes: Option<usize>,
    rotate: bool,
    ctf: Option<CtfParams>,
    pixel_size: f64,
    max_shift: usize,
    seed: u64,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    if !(a.pixel_size > 0.0 && a.pixel_size.is_finite()) {
        return Err(Error::Config(format!("pixel size must be positive, got {}", a.pixel_size)));
    }
    let ctf = a.ctf.then(|| CtfParams::reference(a.pixel_size));
    let (clean, coeffs, radius) = match a.kind {
        Kind::Noise => {
            if a.snr.is_some() {
                return Err(Error::Config("--snr needs --kind phantom".into()));
            }
            (ImageStack::zeros(a.n, a.size), None, None)
        }
        Kind::Phantom => {
            let radius = a.radius.unwrap_or((a.size / 3) as u32);
            if 2 * radius as usize > a.size {
                return Err(Error::Config(format!("radius {radius} does not fit in L = {}", a.size)));
            }
            let spec = build_basis(a.c, radius)?;
            let decay = default_decay(&spec);
            let opts = PhantomOptions {
                n_classes: a.classes,
                rotate: a.rotate,
            };
            let (images, coeffs) = gen_bandlimited_stack(&spec, a.size, a.n, opts, &decay, a.seed)?;
            (images, Some(coeffs), Some(radius))
        }
    };
    let mut clean = clean;
    clean.set_pixel_size(a.pixel_size);
    if let Some(p) = &ctf {
        clean = apply_ctf_envelope(&clean, p)?;
    }
    if a.max_shift > 0 {
        clean = apply_shifts(&clean, a.max_shift, a.seed)?.0;
    }
    let sigma = match (a.sigma, a.snr) {
        (Some(s), _) => s,
        (None, Some(snr)) => {
            if !(snr > 0.0 && snr.is_finite()) {
                return Err(Error::Config(format!("SNR must be positive, got {snr}")));
            }
            (disk_power(&clean, radius.unwrap_or(0) as f64) / snr).sqrt()
        }
        (None, None) => {
            if a.kind == Kind::Noise {
                1.0
            } else {
                0.0
            }
        }
    };
    let noisy = if a.kind == Kind::Noise {
        let mut s = gen_noise_stack(a.n, a.size, sigma, a.seed)?;
        s.set_pixel_size(a.pixel_size);
        s
    } else if sigma > 0.0 {
        add_noise(&clean, sigma, a.seed)?
    } else {
        clean.clone()
    };
    let phantom = a.kind == Kind::Phantom;
    let config = SimulateConfig {
        kind: a.kind,
        n: a.n,
        size: a.size,
        sigma,
        snr: a.snr,
        c: phantom.then_some(a.c),
        radius,
        classes: phantom.then_some(a.classes),
        rotate: a.rotate,
        ctf,
        pixel_size: a.pixel_size,
        max_shift: a.max_shift,
        seed: a.seed,
    };
    let prov = Provenance::new("simulate", &config)?;
    write_stack(&noisy, &a.out, &prov, &[])?;
    if let Some(p) = &a.clean_out {
        write_stack(&clean, p, &prov, &[])?;
    }
    if let Some(p) = &a.coeffs_out {
        let coeffs = coeffs.ok_or_else(|| Error::Config("--coeffs-out needs --kind phantom".into()))?;
        write_coeffs(&coeffs, p, &prov)?;
    }
    eprintln!("wrote {} images of side {} (sigma = {sigma:.6e}) to {}", a.n, a.size, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EstimateReport {
    n_images: usize,
    #[serde(rename = "L")]
    side: usize,
    sigma2: f64,
    /// Estimated support radius in pixels.
    support: f64,
    /// Integer radius used to build a basis.
    #[serde(rename = "R")]
    radius: u32,
    c: f64,
    fraction: f64,
    p_total: usize,
}

#[derive(Serialize)]
struct InputConfig<'a, T: Serialize> {
    input_sha256: String,
    #[serde(flatten)]
    params: &'a T,
}

#[derive(Serialize)]
struct EstimateConfig {
    fraction: f64,
}

fn estimate_params(a: EstimateArgs) -> Result<()> {
    let (stack, _) = read_stack(&a.input)?;
    let sigma2 = estimate_noise_variance(&stack)?;
    let support = estimate_support(&stack, sigma2, a.fraction)?;
    let radius = clamp_radius(support, stack.side());
    let c = estimate_bandlimit(&stack, sigma2, a.fraction)?.min(0.5);
    let spec = build_basis(c, radius)?;
    let report = EstimateReport {
        n_images: stack.len(),
        side: stack.side(),
        sigma2,
        support,
        radius,
        c,
        fraction: a.fraction,
        p_total: spec.p_total(),
    };
    let config = InputConfig {
        input_sha256: file_sha256(&a.input)?,
        params: &EstimateConfig { fraction: a.fraction },
    };
    let prov = Provenance::new("estimate-params", &config)?;
    match &a.out {
        Some(p) => prov.write_json(&report, p),
        None => {
            println!("{}", prov.to_json(&report)?);
            Ok(())
        }
    }
}

/// Rounds a support estimate up to a whole radius that fits the frame.
fn clamp_radius(support: f64, side: usize) -> u32 {
    (support.ceil() as u32).clamp(1, (side / 2).max(1) as u32)
}

#[derive(Debug, Clone, Serialize)]
struct Resolved {
    c: f64,
    #[serde(rename = "R")]
    radius: u32,
    sigma2: Option<f64>,
    /// Which of c, R and sigma2 were estimated from the data.
    estimated: Vec<&'static str>,
    fraction: f64,
    eps: Option<f64>,
    block_size: usize,
}

/// Fills in missing basis parameters from the stack. The noise variance is
/// estimated when asked for or when c or R must be estimated.
fn resolve(stack: &ImageStack, b: &BasisArgs, need_sigma2: bool) -> Result<Resolved> {
    let mut estimated = Vec::new();
    let need = need_sigma2 || b.c.is_none() || b.radius.is_none();
    let sigma2 = match (b.sigma2, need) {
        (Some(s), _) => Some(s),
        (None, true) => {
            estimated.push("sigma2");
            Some(estimate_noise_variance(stack)?)
        }
        (None, false) => None,
    };
    let radius = match b.radius {
        Some(r) => r,
        None => {
            estimated.push("R");
            clamp_radius(estimate_support(stack, sigma2.unwrap_or(0.0), b.fraction)?, stack.side())
        }
    };
    let c = match b.c {
        Some(c) => c,
        None => {
            estimated.push("c");
            estimate_bandlimit(stack, sigma2.unwrap_or(0.0), b.fraction)?.min(0.5)
        }
    };
    Ok(Resolved {
        c,
        radius,
        sigma2,
        estimated,
        fraction: b.fraction,
        eps: (!b.direct).then_some(b.eps),
        block_size: b.block_size,
    })
}

fn expand_stack(stack: &ImageStack, r: &Resolved) -> Result<(FBCoeffs, RadialTable)> {
    let spec = build_basis(r.c, r.radius)?;
    let grid = make_polar_grid(r.c, r.radius)?;
    let table = RadialTable::new(&spec, grid.rule())?;
    let method = match r.eps {
        Some(eps) => PolarMethod::Nufft { eps },
        None => PolarMethod::Direct,
    };
    let opts = ExpandOptions {
        method,
        block_size: r.block_size,
    };
    let coeffs = expand_with(stack, &spec, &grid, &table, opts)?;
    Ok((coeffs, table))
}

fn expand(a: ExpandArgs) -> Result<()> {
    let (stack, _) = read_stack(&a.input)?;
    let r = resolve(&stack, &a.basis, false)?;
    let (coeffs, _) = expand_stack(&stack, &r)?;
    let config = InputConfig {
        input_sha256: file_sha256(&a.input)?,
        params: &r,
    };
    let prov = Provenance::new("expand", &config)?;
    write_coeffs(&coeffs, &a.out, &prov)?;
    eprintln!(
        "expanded {} images with c = {}, R = {} (p_total = {}) into {}",
        coeffs.len(),
        r.c,
        r.radius,
        coeffs.spec().p_total(),
        a.out.display()
    );
    Ok(())
}

fn spca(a: SpcaArgs) -> Result<()> {
    let coeffs = read_coeffs(&a.input)?;
    let spec = coeffs.spec();
    let grid = make_polar_grid(spec.c(), spec.radius())?;
    let table = RadialTable::new(spec, grid.rule())?;
    let basis = steerable_pca(&coeffs, &table)?;
    basis.save(&a.out)?;
    let config = InputConfig {
        input_sha256: file_sha256(&a.input)?,
        params: &serde_json::json!({}),
    };
    let prov = Provenance::new("spca", &config)?;
    prov.embed_in_json_file(&a.out.with_extension("json"))?;
    prov.write_sidecar(&a.out.with_extension("bin"))?;
    eprintln!("steerable PCA of {} images written to {}.{{json,bin}}", coeffs.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DenoiseConfig<'a> {
    basis: &'a Resolved,
    shrinkage: Shrinkage,
    clean_sha256: Option<String>,
    metrics_radius: Option<f64>,
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    if a.metrics.is_some() && a.clean.is_none() {
        return Err(Error::Config("--metrics needs --clean".into()));
    }
    let (stack, labels) = read_stack(&a.input)?;
    let clean = a.clean.as_deref().map(read_stack).transpose()?.map(|(s, _)| s);
    if let Some(c) = &clean {
        if c.len() != stack.len() || c.side() != stack.side() {
            return Err(Error::Shape(format!(
                "clean stack is {} x {}^2, input is {} x {}^2",
                c.len(),
                c.side(),
                stack.len(),
                stack.side()
            )));
        }
    }
    let r = resolve(&stack, &a.basis, true)?;
    let sigma2 = r.sigma2.ok_or_else(|| Error::Internal("noise variance not resolved".into()))?;
    let mode: Shrinkage = a.shrinkage.into();
    let (coeffs, table) = expand_stack(&stack, &r)?;
    let basis = steerable_pca(&coeffs, &table)?;
    let model = NoiseModel::for_basis(sigma2, &basis)?;
    let selection = select_components(&basis, &model)?;
    let weights = filter_weights(&basis, &model, &selection, mode);
    let mut out = denoise_images(&coeffs, &basis, &weights, stack.side())?;
    out.set_pixel_size(stack.pixel_size());
    // metrics describe the stack as stored
    out.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    let metrics_radius = clean.as_ref().map(|_| a.metrics_radius.unwrap_or(r.radius as f64));
    let config = InputConfig {
        input_sha256: file_sha256(&a.input)?,
        params: &DenoiseConfig {
            basis: &r,
            shrinkage: mode,
            clean_sha256: a.clean.as_deref().map(file_sha256).transpose()?,
            metrics_radius,
        },
    };
    let prov = Provenance::new("denoise", &config)?;
    let mut report = DenoiseReport::new(&model, &basis, &selection, weights, mode);
    if let (Some(c), Some(mr)) = (&clean, metrics_radius) {
        let m = metrics(c, &out, mr)?;
        if let Some(p) = &a.metrics {
            let mut w = BufWriter::new(File::create(p)?);
            write_metrics_csv(&m, &mut w)?;
            w.flush()?;
            prov.write_sidecar(p)?;
        }
        report = report.with_metrics(&m);
    }
    write_stack(&out, &a.out, &prov, &labels)?;
    if let Some(p) = &a.report {
        prov.write_json(&report, p)?;
    }
    eprintln!(
        "denoised {} images with {} components (sigma2 = {sigma2:.6e}){}",
        stack.len(),
        report.total_selected,
        report.mean_psnr.map(|p| format!(", mean PSNR {p:.3} dB")).unwrap_or_default()
    );
    Ok(())
}

#[derive(Serialize)]
struct SteerConfig {
    alpha: f64,
    reflect: bool,
}

fn steer(a: SteerArgs) -> Result<()> {
    if !a.alpha.is_finite() {
        return Err(Error::Config(format!("angle must be finite, got {}", a.alpha)));
    }
    let coeffs = read_coeffs(&a.input)?;
    let out = if a.reflect {
        reflect_coeffs(&coeffs, a.alpha)
    } else {
        rotate_coeffs(&coeffs, a.alpha)
    };
    let config = InputConfig {
        input_sha256: file_sha256(&a.input)?,
        params: &SteerConfig {
            alpha: a.alpha,
            reflect: a.reflect,
        },
    };
    write_coeffs(&out, &a.out, &Provenance::new("steer", &config)?)
}

#[derive(Serialize)]
struct BenchConfig<'a> {
    sizes: &'a [usize],
    n: &'a [usize],
    reps: usize,
    c: f64,
    seed: u64,
    threads: usize,
}

fn bench(a: BenchArgs) -> Result<()> {
    let report = run_bench(&a.sizes, &a.n, a.c, a.reps, a.seed)?;
    let config = BenchConfig {
        sizes: &a.sizes,
        n: &a.n,
        reps: a.reps,
        c: a.c,
        seed: a.seed,
        threads: rayon::current_num_threads(),
    };
    let prov = Provenance::new("bench", &config)?;
    if let Some(p) = &a.csv {
        write_bench_csv(&report, BufWriter::new(File::create(p)?))?;
        prov.write_sidecar(p)?;
    }
    match &a.json {
        Some(p) => prov.write_json(&report, p)?,
        None => println!("{}", prov.to_json(&report)?),
    }
    for row in &report.rows {
        eprintln!(
            "L = {:4}  n = {:6}  expansion {:.4e} s  (polar FT {:.1}%)",
            row.side,
            row.n,
            row.expansion,
            100.0 * row.polar_fraction
        );
    }
    if let Some(s) = report.slope_vs_side {
        eprintln!("slope vs L: {s:.3}");
    }
    if let Some(s) = report.slope_vs_n {
        eprintln!("slope vs n: {s:.3}");
    }
    Ok(())
}
