use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use quip_cli::suites::{Check, Size, Suite};
use quip_cli::Fields;
use quip_core::analysis::{audit_trace_bound, hessian_stats, LossReport, Report};
use quip_core::clamp_safe::{quantize_clamp_safe, ClampSafeOptions, RangeScale};
use quip_core::incoherence::{quip, Method, QuipOptions};
use quip_core::linalg::{gaussian_matrix, generate_lowrank_psd, geometric_spectrum, SpectrumSpec};
use quip_core::matio::{
    hessian_from_calibration, read_matrix, read_quantized, write_matrix, write_quantized,
};
use quip_core::rng::streams;
use quip_core::rounding::Subroutine;
use quip_core::{Error, SymmetricPsd};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "quip", version, about = "Weight quantization with incoherence processing")]
struct Cli {
    /// Worker threads for row and trial parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Report format on standard output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,

    /// Also write the report as a two-line tab-separated table.
    #[arg(long, global = true)]
    report: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Kv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Ldlq,
    LdlqRg,
    Greedy,
    Near,
    Stoch,
    ClampSafe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SubroutineArg {
    Nearest,
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SizeArg {
    Quick,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a weight matrix against a Hessian and write a QZ layer.
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        hessian: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        bits: u32,
        #[arg(long, value_enum, default_value_t = MethodArg::Ldlq)]
        method: MethodArg,
        /// Scalar quantizer inside LDLQ.
        #[arg(long, value_enum, default_value_t = SubroutineArg::Nearest)]
        subroutine: SubroutineArg,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        incoherence: Toggle,
        #[arg(long, default_value_t = 2.4)]
        rho: f64,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Greedy passes for ldlq-rg and greedy.
        #[arg(long, default_value_t = 10)]
        passes: usize,
        /// Failure probability budget for clamp-safe.
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Also write the de-quantized weights as QMAT.
        #[arg(long)]
        dequantized: Option<PathBuf>,
    },
    /// Reconstruct real weights from a QZ layer.
    Dequantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run synthetic verification suites; exits 1 if any check fails.
    Verify {
        /// Suite name, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, value_enum, default_value_t = SizeArg::Full)]
        size: SizeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Spectrum and LDL statistics of a Hessian.
    Stats {
        #[arg(long)]
        hessian: PathBuf,
        /// Include the trace-bound audit (one eigendecomposition).
        #[arg(long)]
        audit: bool,
    },
    /// Generate a synthetic low-rank Hessian and optional Gaussian weights.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rank: usize,
        /// Geometric decay of the spectrum.
        #[arg(long, default_value_t = 0.9)]
        decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        hessian: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Rows of the generated weights.
        #[arg(long, default_value_t = 64)]
        m: usize,
    },
    /// Build `H = X^T X / rows` from calibration inputs.
    Calibrate {
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Lib(Error),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_INPUT);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: could not start thread pool: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(EXIT_VERIFY_FAILED),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT })
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Quantize {
            weights,
            hessian,
            out,
            bits,
            method,
            subroutine,
            incoherence,
            rho,
            alpha,
            seed,
            passes,
            delta,
            dequantized,
        } => {
            let w = read_matrix(weights)?;
            let h = SymmetricPsd::new(read_matrix(hessian)?)?;
            let mut fields = Fields::default();
            let (layer, w_hat) = if *method == MethodArg::ClampSafe {
                if *incoherence == Toggle::Off {
                    return Err(Error::Data("clamp-safe always uses incoherence processing".into()).into());
                }
                let opts = ClampSafeOptions {
                    bits: *bits,
                    delta: *delta,
                    seed: *seed,
                    alpha: *alpha,
                    range: RangeScale::Frobenius { rho: *rho },
                    ..Default::default()
                };
                let (layer, w_hat, stats) = quantize_clamp_safe(&w, &h, &opts)?;
                fields.push("method", "clamp-safe");
                fields.push("bits", bits);
                fields.push("seed", seed);
                fields.push("proxy_loss", format!("{:.12e}", stats.proxy_loss));
                fields.push("objective", format!("{:.12e}", stats.objective));
                fields.push("trace_d", format!("{:.12e}", stats.trace_d));
                fields.push("c", format!("{:.12e}", stats.c));
                fields.push("out_of_range", stats.out_of_range);
                fields.push("range_clamps", stats.range_clamps);
                fields.push("solver_iters", stats.solver_iters);
                fields.push("residual", format!("{:.3e}", stats.residual));
                (layer, w_hat)
            } else {
                let opts = QuipOptions {
                    bits: *bits,
                    rho: *rho,
                    alpha: *alpha,
                    seed: *seed,
                    method: match method {
                        MethodArg::Ldlq => Method::Ldlq,
                        MethodArg::LdlqRg => Method::LdlqRg,
                        MethodArg::Greedy => Method::Greedy,
                        MethodArg::Near => Method::Nearest,
                        MethodArg::Stoch => Method::Stochastic,
                        MethodArg::ClampSafe => unreachable!(),
                    },
                    subroutine: match subroutine {
                        SubroutineArg::Nearest => Subroutine::Nearest,
                        SubroutineArg::Stochastic => Subroutine::Stochastic,
                    },
                    incoherence: *incoherence == Toggle::On,
                    passes: *passes,
                    measure_mu: true,
                };
                let out = quip(&w, &h, &opts)?;
                fields.extend(&LossReport::from_quip(&out, &opts));
                (out.layer, out.w_hat)
            };
            write_quantized(&layer, out)?;
            info!("wrote {}", out.display());
            if let Some(p) = dequantized {
                write_matrix(&w_hat, p)?;
            }
            emit(cli, &fields)
        }
        Command::Dequantize { input, out } => {
            let layer = read_quantized(input)?;
            let w = layer.dequantize()?;
            write_matrix(&w, out)?;
            let mut fields = Fields::default();
            fields.push("rows", w.rows());
            fields.push("cols", w.cols());
            fields.push("bits", layer.bits());
            emit(cli, &fields)
        }
        Command::Verify { suite, size, seed } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
                vec![Suite::parse(suite).ok_or_else(|| {
                    Error::Data(format!("unknown suite {suite:?}; expected all or one of {}", names.join(", ")))
                })?]
            };
            let size = match size {
                SizeArg::Quick => Size::Quick,
                SizeArg::Full => Size::Full,
            };
            let mut checks: Vec<Check> = Vec::new();
            for s in suites {
                let found = s.run(size, *seed)?;
                for c in &found {
                    print_check(cli.format, c);
                }
                checks.extend(found);
            }
            if let Some(p) = &cli.report {
                let mut table = String::from("check\tstatus\tdetail\n");
                for c in &checks {
                    table.push_str(&format!("{}\t{}\t{}\n", c.name, c.status(), c.detail));
                }
                write_text(p, &table)?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                eprintln!("{failed}/{} checks failed", checks.len());
                return Err(Failure::Verify);
            }
            Ok(())
        }
        Command::Stats { hessian, audit } => {
            let h = SymmetricPsd::new(read_matrix(hessian)?)?;
            let mut fields = Fields::default();
            fields.extend(&hessian_stats(&h)?);
            if *audit {
                let a = audit_trace_bound(&h)?;
                fields.push("mu_h", format!("{:.12e}", a.mu));
                fields.push("trace_bound_rhs", format!("{:.12e}", a.rhs));
                fields.push("trace_bound_holds", a.holds);
            }
            emit(cli, &fields)
        }
        Command::Gen {
            n,
            rank,
            decay,
            seed,
            hessian,
            weights,
            m,
        } => {
            if *rank == 0 || rank > n {
                return Err(Error::Data(format!("rank must be in 1..={n}, got {rank}")).into());
            }
            if !(*decay > 0.0 && *decay <= 1.0) {
                return Err(Error::Data("decay must lie in (0, 1]".into()).into());
            }
            let spec = SpectrumSpec::new(geometric_spectrum(*rank, 1.0, *decay))?;
            let h = generate_lowrank_psd(*n, &spec, *seed)?;
            write_matrix(h.matrix(), hessian)?;
            if let Some(p) = weights {
                write_matrix(&gaussian_matrix(*m, *n, 1.0, *seed, streams::SYNTHETIC), p)?;
            }
            let mut fields = Fields::default();
            fields.push("n", n);
            fields.push("rank", rank);
            fields.push("trace_h", format!("{:.12e}", h.trace()));
            emit(cli, &fields)
        }
        Command::Calibrate { inputs, out } => {
            let x = read_matrix(inputs)?;
            let h = hessian_from_calibration(&x)?;
            write_matrix(h.matrix(), out)?;
            let mut fields = Fields::default();
            fields.push("samples", x.rows());
            fields.push("n", h.n());
            emit(cli, &fields)
        }
    }
}

fn emit(cli: &Cli, r: &impl Report) -> Result<(), Failure> {
    match cli.format {
        Format::Table => print!("{}", r.to_table()),
        Format::Kv => print!("{}", r.to_kv()),
    }
    if let Some(p) = &cli.report {
        write_text(p, &r.to_tsv())?;
    }
    Ok(())
}

fn print_check(format: Format, c: &Check) {
    match format {
        Format::Table => println!("{}  {:<42} {}", c.status(), c.name, c.detail),
        Format::Kv => println!("check={} status={} detail={}", c.name, c.status(), c.detail),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Lib(Error::Io(e)))
}
