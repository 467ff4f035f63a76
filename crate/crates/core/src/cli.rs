//! Command-line surface: `synth`, `unmix`, `eval` and `selftest`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::engine::run_with_progress;
use crate::error::{HelenError, Result};
use crate::io::{self, ResultFile, RunConfig, TruthFile};
use crate::metrics::evaluate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "helen", version, about = "Hyperspectral unmixing under endmember variability")]
pub struct Cli {
    /// Worker threads for the engine (default: all cores).
    #[arg(long, env = "HELEN_THREADS", global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cube with ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Unmix a cube.
    Unmix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Score a result against ground truth.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Check closed forms against numerical oracles.
    Selftest {
        /// Fewer Monte-Carlo samples.
        #[arg(long)]
        quick: bool,
    },
}

pub fn exit_code(e: &HelenError) -> i32 {
    match e {
        HelenError::Config(_) => EXIT_CONFIG,
        HelenError::Numerical { .. } | HelenError::NonFiniteElbo { .. } | HelenError::Domain { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn synth_cmd(config: &PathBuf, prefix: &str) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let gt = crate::synth::generate(&cfg.synth)?;
    io::write_cube(&gt.cube, format!("{prefix}.cube"))?;
    io::write_json(&TruthFile::from_truth(&gt), format!("{prefix}.truth.json"))?;
    std::fs::write(format!("{prefix}.endmembers.csv"), io::endmember_csv(&gt.base_endmembers))?;
    eprintln!("wrote {prefix}.cube ({}x{}x{})", gt.cube.rows(), gt.cube.cols(), gt.cube.bands());
    Ok(())
}

fn unmix_cmd(config: &PathBuf, cube: &PathBuf, prefix: &str) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let cube = io::read_cube(cube)?;
    let mut csv = String::from(io::elbo_csv_header());
    let result = run_with_progress(&cube, &cfg.engine, |r| {
        log::info!("sweep {} elbo {:.6e} sigma2 {:.3e} gamma {:.3e}", r.sweep, r.elbo, r.noise_var, r.outlier_rate);
        csv.push_str(&io::elbo_csv_row(r));
    })?;
    io::write_json(&ResultFile::from_result(&result), format!("{prefix}.result.json"))?;
    std::fs::write(format!("{prefix}.elbo.csv"), csv)?;
    let k = result.endmembers.len() as f64;
    let mean = result.endmembers.iter().fold(nalgebra::DMatrix::zeros(cube.bands(), cfg.engine.n_endmembers), |acc, a| acc + a) / k;
    std::fs::write(format!("{prefix}.endmembers.csv"), io::endmember_csv(&mean))?;
    eprintln!("{} sweeps, converged: {}", result.iterations, result.converged);
    Ok(())
}

fn eval_cmd(result: &PathBuf, truth: &PathBuf, out: Option<&PathBuf>, threshold: f64) -> Result<()> {
    let res = ResultFile::load(result)?.to_result()?;
    let truth = TruthFile::load(truth)?;
    if truth.n_endmembers != res.abundances.nrows() || truth.bands != res.endmembers[0].nrows() {
        return Err(HelenError::Data("result and truth differ in endmember count or bands".into()));
    }
    if truth.rows != res.grid.rows || truth.cols != res.grid.cols {
        return Err(HelenError::Data("result and truth differ in image size".into()));
    }
    let mut report = evaluate(
        &res.per_pixel_endmembers(),
        &res.abundances,
        &res.outlier_scores,
        &truth.endmembers()?,
        &truth.abundance_matrix()?,
        &truth.outlier_mask,
    )?;
    if threshold != 0.5 {
        let s = crate::metrics::outlier_scores(&res.outlier_scores, &truth.outlier_mask, threshold)?;
        report.outlier_precision = s.precision;
        report.outlier_recall = s.recall;
        report.outlier_f1 = s.f1;
    }
    let text = io::report_json(&report)?;
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, &text)?;
    }
    Ok(())
}

fn selftest_cmd(quick: bool) -> Result<bool> {
    let cases = crate::oracle::selftest(quick);
    let mut ok = true;
    for c in &cases {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth { config, out_prefix } => synth_cmd(config, out_prefix).map(|_| EXIT_OK),
        Command::Unmix { config, cube, out_prefix } => unmix_cmd(config, cube, out_prefix).map(|_| EXIT_OK),
        Command::Eval { result, truth, out, threshold } => eval_cmd(result, truth, out.as_ref(), *threshold).map(|_| EXIT_OK),
        Command::Selftest { quick } => selftest_cmd(*quick).map(|ok| if ok { EXIT_OK } else { EXIT_NUMERICAL }),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(HelenError::Config("--threads must be >= 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(HelenError::Config(e.to_string())),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
