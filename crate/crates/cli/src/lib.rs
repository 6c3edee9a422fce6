//! Library side of the `rmac` command: configuration layering, the
//! subcommands and the argument parser.

pub mod commands;
pub mod config;
pub mod html;

use std::ffi::OsString;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::Outcome;
use crate::config::{RunConfig, KEYS};

/// Exit status: everything succeeded.
pub const EXIT_OK: u8 = 0;
/// Some inputs failed; outputs and manifests were still written.
pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_FATAL: u8 = 2;

const SUBCOMMANDS: &[(&str, &str)] = &[
    (
        "extract",
        "Run the backbone over --images and store feature tensors under --out",
    ),
    (
        "fit",
        "Fit whitening and the attention dictionary on the gallery into --out",
    ),
    (
        "embed",
        "Describe every gallery image with fitted --models into the --out descriptor file",
    ),
    ("search", "Rank --index for every query and write rankings"),
    ("evaluate", "Compute NAR and MAP@K of --index against --gt"),
    (
        "ablate",
        "Fit, describe and evaluate each --methods variant and print a comparison table",
    ),
    (
        "contact-sheet",
        "Render --rankings as an HTML grid of top results",
    ),
    (
        "synth",
        "Write a synthetic logo gallery with planted near-duplicates and its ground truth",
    ),
];

pub fn cli() -> Command {
    let mut cmd = Command::new("rmac")
        .about("Multi-resolution regional descriptors with unsupervised regional attention for trademark retrieval")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value configuration file; RMF_<KEY> variables and flags override it"),
        );
    for (key, default, help) in KEYS {
        let long = key.replace('_', "-");
        let help = match default {
            Some(d) => format!("{help} [default: {d}]"),
            None => help.to_string(),
        };
        let arg = Arg::new(*key).long(long).global(true).help(help);
        let arg = if *key == "force" {
            arg.action(ArgAction::SetTrue)
        } else {
            arg.value_name(key.to_ascii_uppercase())
        };
        cmd = cmd.arg(arg);
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

fn flags_from(m: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (key, _, _) in KEYS {
        if *key == "force" {
            if m.get_flag(key) {
                out.push((key.to_string(), "true".into()));
            }
        } else if let Some(v) = m.get_one::<String>(key) {
            out.push((key.to_string(), v.clone()));
        }
    }
    out
}

/// Parse arguments, resolve the configuration and run one subcommand.
pub fn run<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let file = sub
        .get_one::<String>("config")
        .map(std::path::PathBuf::from);
    let cfg = RunConfig::resolve(file.as_deref(), std::env::vars(), &flags_from(sub))?;
    log::debug!("resolved configuration {}:\n{}", cfg.hash(), cfg.snapshot());
    dispatch(name, &cfg)
}

pub fn dispatch(name: &str, cfg: &RunConfig) -> Result<Outcome> {
    match name {
        "extract" => commands::extract(cfg),
        "fit" => commands::fit(cfg),
        "embed" => commands::embed(cfg),
        "search" => commands::search(cfg),
        "evaluate" => commands::evaluate_cmd(cfg),
        "ablate" => commands::ablate(cfg),
        "contact-sheet" => commands::contact_sheet_cmd(cfg),
        "synth" => commands::synth(cfg),
        other => anyhow::bail!("unknown command `{other}`"),
    }
}

/// Map a run result to the process exit status.
pub fn exit_status(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(o) if o.failures == 0 => EXIT_OK,
        Ok(_) => EXIT_PARTIAL,
        Err(_) => EXIT_FATAL,
    }
}

/// The error and its causes on one line, skipping causes whose text the
/// previous message already ends with.
pub fn describe_error(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}
