//! Command-line front end.
//!
//! Every command reads --config PATH (or starts from defaults), applies
//! --set key=value overrides, and writes its artifacts under --out DIR.
//! Failures exit with a machine-parsable category on the last stderr
//! line: E_CONFIG(2), E_IO(3), E_SHAPE(4), E_NUMERIC(5), E_PLAN(6).

mod commands;
mod config;
mod verify;

use asyrp::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "usage: asyrp <command> [--config PATH] [--set key=value ...] [--out DIR] [--threads N]

commands:
  gen-data         render the glyph dataset archive
  train-base       train and freeze the noise predictor
  invert           precompute latents and trajectory statistics
  curves           perceptual-distance curves plus threshold calibration
  plan             solve the editing/boosting intervals into a plan
  train-direction  train one implicit direction network
  edit             edit dataset samples with trained directions
  sample           conditional random sampling
  verify           run the invariant suite and write its report
  export-curves    re-export a stored curve document as CSV
";

struct Args {
    command: String,
    config_path: Option<PathBuf>,
    sets: Vec<(String, String)>,
    out: PathBuf,
    threads: Option<usize>,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    if argv.is_empty() {
        return Err("missing command".to_string());
    }
    let mut args = Args {
        command: argv[0].clone(),
        config_path: None,
        sets: Vec::new(),
        out: PathBuf::from("out"),
        threads: None,
    };
    let mut i = 1;
    while i < argv.len() {
        let need_value = |i: usize| -> Result<&String, String> {
            argv.get(i + 1).ok_or_else(|| format!("{} needs a value", argv[i]))
        };
        match argv[i].as_str() {
            "--config" => {
                args.config_path = Some(PathBuf::from(need_value(i)?));
                i += 2;
            }
            "--set" => {
                let kv = need_value(i)?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("--set expects key=value, got {kv}"))?;
                args.sets.push((k.to_string(), v.to_string()));
                i += 2;
            }
            "--out" => {
                args.out = PathBuf::from(need_value(i)?);
                i += 2;
            }
            "--threads" => {
                let n: usize = need_value(i)?
                    .parse()
                    .map_err(|_| "--threads expects a number".to_string())?;
                args.threads = Some(n);
                i += 2;
            }
            other => return Err(format!("unknown argument {other}")),
        }
    }
    Ok(args)
}

fn error_category(err: &Error) -> (&'static str, u8) {
    match err {
        Error::Config(_) | Error::Json(_) => ("E_CONFIG", 2),
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::Version(_)
        | Error::Truncated(_)
        | Error::Header(_) => ("E_IO", 3),
        Error::Shape { .. } => ("E_SHAPE", 4),
        Error::NonFinite { .. } | Error::NonScalarRoot(_) | Error::Diverged(_) => {
            ("E_NUMERIC", 5)
        }
        Error::Plan(_) | Error::Schedule(_) => ("E_PLAN", 6),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(&argv) {
        Ok(a) => a,
        Err(msg) => {
            eprint!("{USAGE}");
            eprintln!("E_CONFIG: {msg}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = args.threads {
        asyrp::parallel::set_threads(n);
    }

    let run = || -> asyrp::error::Result<bool> {
        let json = match &args.config_path {
            Some(p) => std::fs::read_to_string(p)?,
            None => "{\"seed\": 0}".to_string(),
        };
        let config = config::load_config(&json, &args.sets)?;
        let ctx = commands::Context::prepare(config, &args.out)?;
        match args.command.as_str() {
            "gen-data" => commands::gen_data(&ctx).map(|_| true),
            "train-base" => commands::train_base_cmd(&ctx).map(|_| true),
            "invert" => commands::invert_cmd(&ctx).map(|_| true),
            "curves" => commands::curves_cmd(&ctx).map(|_| true),
            "plan" => commands::plan_cmd(&ctx).map(|_| true),
            "train-direction" => commands::train_direction_cmd(&ctx).map(|_| true),
            "edit" => commands::edit_cmd(&ctx).map(|_| true),
            "sample" => commands::sample_cmd(&ctx).map(|_| true),
            "verify" => commands::verify_cmd(&ctx),
            "export-curves" => commands::export_curves_cmd(&ctx).map(|_| true),
            other => Err(Error::Config(format!("unknown command {other:?}"))),
        }
    };

    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("E_NUMERIC: verification found failing invariants");
            ExitCode::from(5)
        }
        Err(err) => {
            let (category, code) = error_category(&err);
            eprintln!("{category}: {err}");
            ExitCode::from(code)
        }
    }
}
