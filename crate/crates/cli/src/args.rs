use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use mfr_core::storefmt::{config_from_map, ConfigKey, CONFIG_KEYS};
use mfr_core::trainer::{Preset, TrainConfig};
use mfr_core::{Error, Result};
use serde_json::{Map, Value};

/// `--flag` spelling of a configuration key.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn presets_help() -> String {
    let mut text = String::from("Presets:\n");
    for p in Preset::ALL {
        let c = TrainConfig::preset(p, mfr_core::trainer::Mode::Baseline);
        text.push_str(&format!(
            "  {:<16} {} SAEs, hidden {:?}, k {:?}, batch {}, {} examples\n",
            p.name(),
            c.n_saes(),
            c.hidden[0],
            c.k,
            c.batch_size,
            c.total_examples
        ));
    }
    text
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("JSON configuration; flags below override its keys")];
    args.extend(CONFIG_KEYS.iter().map(|k| {
        Arg::new(k.name)
            .long(flag_name(k.name))
            .value_name(k.value)
            .help(k.help)
            .help_heading("Configuration keys")
    }));
    args
}

fn out_arg(required: bool) -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("DIR")
        .required(required)
        .value_parser(value_parser!(PathBuf))
        .help("directory for everything the command writes")
}

fn ckpt_arg() -> Arg {
    Arg::new("ckpt")
        .long("ckpt")
        .value_name("FILE")
        .action(ArgAction::Append)
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help("SAE checkpoint (repeat once per SAE)")
}

fn samples_arg(help: &'static str, default: &'static str) -> Arg {
    Arg::new("samples")
        .long("samples")
        .value_name("N")
        .default_value(default)
        .value_parser(value_parser!(usize))
        .help(help)
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn threshold_arg(name: &'static str, default: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("SIM")
        .default_value(default)
        .value_parser(value_parser!(f64))
        .help(help)
}

pub fn command() -> Command {
    Command::new("mfr")
        .about("Train and evaluate TopK sparse autoencoder ensembles with mutual feature regularization")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("workers")
                .long("workers")
                .global(true)
                .env("MFR_WORKERS")
                .value_name("N")
                .value_parser(value_parser!(u16).range(1..))
                .help("worker threads (results do not depend on it)"),
        )
        .subcommand(
            Command::new("gen")
                .about("Generate a synthetic ground-truth feature matrix and optional samples")
                .args(config_args())
                .arg(out_arg(true))
                .arg(
                    Arg::new("samples")
                        .long("samples")
                        .value_name("N")
                        .value_parser(value_parser!(u64))
                        .help("also write N samples as an activation file"),
                )
                .after_help(presets_help()),
        )
        .subcommand(
            Command::new("train")
                .about("Train an SAE ensemble, writing metrics and checkpoints")
                .args(config_args())
                .arg(out_arg(true))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_name("FILE")
                        .action(ArgAction::Append)
                        .value_parser(value_parser!(PathBuf))
                        .help("continue from checkpoints (repeat once per SAE, in order)"),
                )
                .after_help(presets_help()),
        )
        .subcommand(
            Command::new("eval")
                .about("Measure ground-truth recovery and cross-SAE similarity")
                .arg(ckpt_arg())
                .arg(path_arg("features", "ground-truth feature file"))
                .arg(samples_arg("held-out samples for activation frequencies", "10000"))
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("INT")
                        .default_value("0")
                        .value_parser(value_parser!(u64))
                        .help("index of the held-out sample stream"),
                )
                .arg(threshold_arg("cluster-hi", "0.8", "cluster: minimum cross-SAE similarity"))
                .arg(threshold_arg("cluster-lo", "0.4", "cluster: maximum ground-truth similarity"))
                .arg(out_arg(true)),
        )
        .subcommand(
            Command::new("match")
                .about("Hungarian assignment between the features of two checkpoints")
                .arg(ckpt_arg().num_args(1))
                .arg(out_arg(false)),
        )
        .subcommand(
            Command::new("report")
                .about("Ensemble report without requiring ground truth")
                .arg(ckpt_arg())
                .arg(path_arg("features", "ground-truth feature file (adds recovery metrics)"))
                .arg(path_arg("activations", "activation file; its last rows give frequencies"))
                .arg(path_arg("metrics", "training metrics to summarize"))
                .arg(samples_arg("samples for activation frequencies", "10000"))
                .arg(threshold_arg("cluster-hi", "0.8", "cluster: minimum cross-SAE similarity"))
                .arg(threshold_arg("cluster-lo", "0.4", "cluster: maximum ground-truth similarity"))
                .arg(out_arg(true)),
        )
}

fn typed(key: &ConfigKey) -> bool {
    ["INT", "FLOAT", "BOOL"].iter().any(|t| key.value.contains(t))
}

fn read_config_map(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::Config(format!(
            "{}: configuration must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(Error::Config(format!("{}: malformed JSON: {e}", path.display()))),
    }
}

/// Configuration file keys with command-line flags applied on top.
pub fn config_map(m: &ArgMatches) -> Result<Map<String, Value>> {
    let mut map = match m.get_one::<PathBuf>("config") {
        Some(path) => read_config_map(path)?,
        None => Map::new(),
    };
    for key in CONFIG_KEYS {
        if let Some(raw) = m.get_one::<String>(key.name) {
            let value = if typed(key) {
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()))
            } else {
                Value::String(raw.clone())
            };
            map.insert(key.name.to_string(), value);
        }
    }
    Ok(map)
}

pub fn train_config(m: &ArgMatches) -> Result<TrainConfig> {
    config_from_map(&config_map(m)?)
}
