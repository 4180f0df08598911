//! Command-line surface. Exit codes: 0 success, 1 failed check, 2 usage or
//! configuration error, 3 unreadable or malformed file.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{count_flops, eval_alignment_recovery, gen_scenario, DEFAULT_RADIUS};
use crate::autodiff::gradcheck_report;
use crate::block::{block_forward_detailed, init_params};
use crate::error::{Error, Result};
use crate::io::{read_params, read_tensor, write_params, write_pgm, write_tensor, RunConfig};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "c2former", version, about = "RGB-infrared cross-modal fusion block")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct BlockInputs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    params: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MapKind {
    /// IR queries against RGB keys.
    Rgb,
    /// RGB queries against IR keys.
    Ir,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the block on a pair of feature maps.
    Forward {
        #[command(flatten)]
        inputs: BlockInputs,
        #[arg(long)]
        out_rgb: PathBuf,
        #[arg(long)]
        out_ir: PathBuf,
    },
    /// Write one attention row, reshaped to the sampled grid, as a PGM.
    AttnMap {
        #[command(flatten)]
        inputs: BlockInputs,
        /// Query position `y,x` on the sampled grid.
        #[arg(long, value_parser = parse_query)]
        query: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "rgb")]
        map: MapKind,
        #[arg(long, default_value_t = 0)]
        batch: usize,
        #[arg(long)]
        out_rgb: Option<PathBuf>,
        #[arg(long)]
        out_ir: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the FLOPs model.
    Flops {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the synthetic misregistration experiment.
    CalibSim {
        #[arg(long)]
        config: PathBuf,
        /// Also write one CSV row per scored query.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Write freshly initialized parameters for the config's seed.
    InitParams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_query(s: &str) -> std::result::Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(y)?, num(x)?))
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Format(_) | Error::Io(_) => EXIT_FORMAT,
        _ => EXIT_USAGE,
    }
}

fn load_inputs(i: &BlockInputs) -> Result<(RunConfig, Tensor, Tensor, crate::block::BlockParams)> {
    let cfg = RunConfig::load(&i.config)?;
    let rgb = read_tensor(&i.rgb)?;
    let ir = read_tensor(&i.ir)?;
    let params = read_params(&i.params, cfg.channels)?;
    Ok((cfg, rgb, ir, params))
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Forward {
            inputs,
            out_rgb,
            out_ir,
        } => {
            let (cfg, rgb, ir, p) = load_inputs(&inputs)?;
            let t = block_forward_detailed(&rgb, &ir, &p, &cfg.block_config())?;
            write_tensor(out_rgb, &t.out_rgb)?;
            write_tensor(out_ir, &t.out_ir)?;
        }
        Command::AttnMap {
            inputs,
            query: (qy, qx),
            out: pgm,
            map,
            batch,
            out_rgb,
            out_ir,
        } => {
            let (cfg, rgb, ir, p) = load_inputs(&inputs)?;
            let bc = cfg.block_config();
            let t = block_forward_detailed(&rgb, &ir, &p, &bc)?;
            let (hs, ws) = (bc.sampled_height(), bc.sampled_width());
            if qy >= hs || qx >= ws {
                return Err(Error::InvalidArgument(format!(
                    "query ({qy},{qx}) outside the {hs}x{ws} sampled grid"
                )));
            }
            let maps = match map {
                MapKind::Rgb => &t.ica.m_rgb,
                MapKind::Ir => &t.ica.m_ir,
            };
            let m = maps.get(batch).ok_or_else(|| {
                Error::InvalidArgument(format!("batch {batch} outside 0..{}", maps.len()))
            })?;
            let row = Tensor::new(&[hs, ws], m.row(qy * ws + qx).to_vec())?;
            write_pgm(pgm, &row)?;
            if let Some(path) = out_rgb {
                write_tensor(path, &t.out_rgb)?;
            }
            if let Some(path) = out_ir {
                write_tensor(path, &t.out_ir)?;
            }
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(config)?.block_config();
            let report = gradcheck_report(&cfg, cfg.seed)?;
            write!(out, "{}", report.to_csv())?;
            writeln!(out, "max_rel_err,{:e}", report.max_rel_err())?;
            writeln!(out, "passed,{}", report.passed())?;
            if !report.passed() {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Flops { config } => {
            let cfg = RunConfig::load(config)?.block_config();
            write!(out, "{}", count_flops(&cfg)?.to_csv())?;
        }
        Command::CalibSim { config, per_query } => {
            let cfg = RunConfig::load(config)?;
            let report = eval_alignment_recovery(&gen_scenario(&cfg.scenario())?, DEFAULT_RADIUS)?;
            write!(out, "{}", report.summary())?;
            if let Some(path) = per_query {
                std::fs::write(path, report.to_csv())?;
            }
        }
        Command::InitParams { config, out: path } => {
            let cfg = RunConfig::load(config)?.block_config();
            write_params(path, &init_params(&cfg)?)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command,
/// reporting to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
