//! Command-line front end: data generation, training, the pooling ablation
//! and every evaluation, driven by one experiment configuration.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{canonical_key, parse_config, Assignments, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "LLIP_THREADS";

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-data", "render training scenes to a directory"),
    ("train", "train one model and write its checkpoint and loss curve"),
    ("eval", "zero-shot shape classification of a checkpoint on held-out scenes"),
    ("retrieval", "held-out image-text retrieval recall of a checkpoint"),
    ("spectrum", "singular-value spectrum of a checkpoint's token features"),
    ("flops", "analytic FLOP counts for a zero-shot prediction"),
    ("ablate", "train and compare all five pooling variants"),
    ("gradcheck", "finite-difference gradient checks of every component"),
];

fn needs_checkpoint(name: &str) -> bool {
    matches!(name, "eval" | "retrieval" | "spectrum")
}

pub fn command() -> Command {
    let mut root = Command::new("llip")
        .about("Text-conditioned visual pooling for contrastive image-text pretraining")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value configuration file"),
        );
        if needs_checkpoint(name) {
            sub = sub.arg(
                Arg::new("checkpoint")
                    .long("checkpoint")
                    .value_name("PATH")
                    .required(true)
                    .value_parser(clap::value_parser!(PathBuf)),
            );
        }
        for (_, flag, help) in KEYS {
            sub = sub.arg(
                Arg::new(*flag)
                    .long(*flag)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .allow_hyphen_values(true)
                    .help(*help),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn overrides(m: &ArgMatches) -> Assignments {
    let mut a = Assignments::new();
    for (_, flag, _) in KEYS {
        if let Some(v) = m.get_one::<String>(flag) {
            a.insert(canonical_key(flag).expect("flag is a key"), v.clone());
        }
    }
    a
}

/// Worker cap from the environment; unset means 1.
pub fn thread_cap() -> Result<usize, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("{} must be a positive integer, got `{}`", THREADS_ENV, v)),
        },
    }
}

/// Runs one invocation and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let threads = match thread_cap() {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {}", msg);
            return EXIT_INVALID;
        }
    };
    log::debug!("worker cap {}", threads);
    let cfg = match parse_config(sub.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides(sub)) {
        Ok(c) => c,
        Err(e) => {
            eprint!("error: {}", e);
            return EXIT_INVALID;
        }
    };
    let checkpoint = if needs_checkpoint(name) {
        sub.get_one::<PathBuf>("checkpoint").cloned()
    } else {
        None
    };
    let result = match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg, &checkpoint.expect("required")),
        "retrieval" => commands::retrieval(&cfg, &checkpoint.expect("required")),
        "spectrum" => commands::spectrum(&cfg, &checkpoint.expect("required")),
        "flops" => commands::flops(&cfg),
        "ablate" => commands::ablate(&cfg),
        "gradcheck" => commands::gradcheck(&cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                llip::LlipError::Config(_) => EXIT_INVALID,
                _ => EXIT_FAILURE,
            }
        }
    }
}
