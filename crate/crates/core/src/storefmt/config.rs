//! Run configuration files.
//!
//! A configuration is a flat JSON object. Keys not set fall back to the
//! chosen preset (`paper-synthetic` unless `preset` says otherwise). Unknown
//! keys and ill-typed values are errors, and all problems in a document are
//! reported together.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::mfr::AlphaMode;
use crate::trainer::{DataSource, Mode, OnExhaustion, Preset, TrainConfig};

/// A documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct ConfigKey {
    pub name: &'static str,
    pub value: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, value: &'static str, help: &'static str) -> ConfigKey {
    ConfigKey { name, value, help }
}

/// Every accepted key.
pub const CONFIG_KEYS: &[ConfigKey] = &[
    key("preset", "NAME", "base settings: paper-synthetic, paper-lm or paper-eeg"),
    key("mode", "baseline|mfr", "training objective; mfr enables reinit and penalty"),
    key("n_saes", "INT", "number of SAEs trained in lockstep"),
    key("hidden", "INT|[INT]", "hidden size, shared or per SAE"),
    key("k", "INT|[INT]", "TopK active units, shared or per SAE"),
    key("learning_rate", "FLOAT", "AdamW learning rate"),
    key("beta1", "FLOAT", "AdamW first-moment decay"),
    key("beta2", "FLOAT", "AdamW second-moment decay"),
    key("epsilon", "FLOAT", "AdamW denominator offset"),
    key("weight_decay", "FLOAT", "AdamW decoupled weight decay"),
    key("batch_size", "INT", "samples per step"),
    key("total_examples", "INT", "training samples; steps = total_examples / batch_size"),
    key("max_steps", "INT", "stop after this many steps"),
    key("source", "synthetic|activations", "where training data comes from"),
    key("activations", "PATH", "activation file (selects the activations source)"),
    key("on_exhaustion", "wrap|error", "behaviour when the activation file runs out"),
    key("dim", "INT", "synthetic: ambient dimension d"),
    key("features", "INT", "synthetic: ground-truth feature count G"),
    key("groups", "INT", "synthetic: group count E"),
    key("active_per_group", "INT", "synthetic: features drawn per active group K"),
    key("lambda", "FLOAT", "synthetic: probability decay rate in (0,1)"),
    key("groups_per_sample", "INT", "synthetic: groups active in each sample"),
    key("data_seed", "INT", "synthetic: generator seed (defaults to seed)"),
    key("reinit", "BOOL", "enable conditional reinitialization"),
    key("probe_steps", "INT", "steps after each initialization before probing"),
    key("reinit_threshold", "FLOAT", "inactivity metric that triggers reinitialization"),
    key("max_attempts", "INT", "reinitializations allowed per SAE"),
    key("reprobe", "BOOL", "probe every probe_steps instead of once per init"),
    key("penalty", "BOOL", "enable the mutual MMCS penalty"),
    key("alpha", "FLOAT|\"calibrated\"", "penalty weight, or match the initial loss"),
    key("warmup_steps", "INT", "cosine warmup of the penalty weight"),
    key("symmetrize", "BOOL", "average both MMCS directions in the penalty"),
    key("log_every", "INT", "steps between metrics rows"),
    key("checkpoint_every", "INT", "steps between checkpoints (0: final only)"),
    key("seed", "INT", "seed for SAE initialization (and data unless data_seed)"),
];

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("malformed configuration JSON: {e}")))?;
    match value {
        Value::Object(map) => config_from_map(&map),
        _ => Err(Error::Config("configuration must be a JSON object".into())),
    }
}

/// Builds and validates a configuration from key/value pairs.
pub fn config_from_map(map: &Map<String, Value>) -> Result<TrainConfig> {
    let mut p = Parser {
        map,
        problems: Vec::new(),
    };
    for k in map.keys() {
        if !CONFIG_KEYS.iter().any(|c| c.name == k) {
            p.problems.push(format!("unknown key `{k}`"));
        }
    }
    let preset = p
        .string("preset")
        .and_then(|s| p.parsed::<Preset>("preset", &s))
        .unwrap_or(Preset::PaperSynthetic);
    let mode = p
        .string("mode")
        .and_then(|s| p.parsed::<Mode>("mode", &s))
        .unwrap_or(Mode::Baseline);
    let mut cfg = TrainConfig::preset(preset, mode);

    let n = p.uint("n_saes");
    let hidden = p.uint_list("hidden");
    let ks = p.uint_list("k");
    let n = n
        .or(hidden.as_ref().and_then(List::len))
        .or(ks.as_ref().and_then(List::len))
        .unwrap_or(cfg.n_saes());
    cfg.hidden = resize("hidden", hidden, &cfg.hidden, n, &mut p.problems);
    cfg.k = resize("k", ks, &cfg.k, n, &mut p.problems);

    let o = &mut cfg.optimizer;
    set(&mut o.learning_rate, p.float("learning_rate"));
    set(&mut o.beta1, p.float("beta1"));
    set(&mut o.beta2, p.float("beta2"));
    set(&mut o.epsilon, p.float("epsilon"));
    set(&mut o.weight_decay, p.float("weight_decay"));
    set(&mut cfg.batch_size, p.uint("batch_size"));
    set(&mut cfg.total_examples, p.uint("total_examples").map(|v| v as u64));
    if let Some(m) = p.uint("max_steps") {
        cfg.max_steps = Some(m as u64);
    }
    let seed = p.u64("seed");
    set(&mut cfg.seed, seed);

    let activations = p.string("activations");
    let source = p.string("source");
    let on_exhaustion = p.string("on_exhaustion").and_then(|s| match s.as_str() {
        "wrap" => Some(OnExhaustion::Wrap),
        "error" => Some(OnExhaustion::Error),
        other => {
            p.problems
                .push(format!("on_exhaustion must be `wrap` or `error`, got `{other}`"));
            None
        }
    });
    let use_file = match source.as_deref() {
        Some("activations") => true,
        Some("synthetic") => false,
        Some(other) => {
            p.problems
                .push(format!("source must be `synthetic` or `activations`, got `{other}`"));
            false
        }
        None => activations.is_some() || matches!(cfg.source, DataSource::Activations { .. }),
    };
    const SYNTHETIC_KEYS: [&str; 7] = [
        "dim",
        "features",
        "groups",
        "active_per_group",
        "lambda",
        "groups_per_sample",
        "data_seed",
    ];
    if use_file {
        let (mut path, mut policy) = match &cfg.source {
            DataSource::Activations {
                path,
                on_exhaustion,
            } => (path.clone(), *on_exhaustion),
            DataSource::Synthetic(_) => (PathBuf::new(), OnExhaustion::Wrap),
        };
        match activations {
            Some(a) => path = PathBuf::from(a),
            None if path.as_os_str().is_empty() => p
                .problems
                .push("source `activations` requires the `activations` path".into()),
            None => {}
        }
        set(&mut policy, on_exhaustion);
        for k in SYNTHETIC_KEYS {
            if map.contains_key(k) {
                p.problems
                    .push(format!("`{k}` only applies to the synthetic source"));
            }
        }
        cfg.source = DataSource::Activations {
            path,
            on_exhaustion: policy,
        };
    } else {
        let mut g = match &cfg.source {
            DataSource::Synthetic(g) => g.clone(),
            DataSource::Activations { .. } => {
                crate::synthgen::GenConfig::paper_synthetic(cfg.seed)
            }
        };
        set(&mut g.dim, p.uint("dim"));
        set(&mut g.features, p.uint("features"));
        set(&mut g.groups, p.uint("groups"));
        set(&mut g.active_per_group, p.uint("active_per_group"));
        set(&mut g.decay, p.float("lambda"));
        set(&mut g.groups_per_sample, p.uint("groups_per_sample"));
        set(&mut g.seed, p.u64("data_seed").or(seed));
        if activations.is_some() || on_exhaustion.is_some() {
            p.problems
                .push("`activations`/`on_exhaustion` need source `activations`".into());
        }
        cfg.source = DataSource::Synthetic(g);
    }

    set(&mut cfg.use_reinit, p.bool("reinit"));
    set(&mut cfg.reinit.probe_steps, p.uint("probe_steps").map(|v| v as u64));
    set(&mut cfg.reinit.threshold, p.float("reinit_threshold"));
    if let Some(m) = p.uint("max_attempts") {
        match u32::try_from(m) {
            Ok(m) => cfg.reinit.max_attempts = m,
            Err(_) => p.problems.push("max_attempts is too large".into()),
        }
    }
    set(&mut cfg.reinit.reprobe, p.bool("reprobe"));
    set(&mut cfg.use_penalty, p.bool("penalty"));
    if let Some(v) = map.get("alpha") {
        match v {
            Value::String(s) if s == "calibrated" => cfg.penalty.alpha = AlphaMode::Calibrated,
            Value::Number(x) if x.as_f64().is_some() => {
                cfg.penalty.alpha = AlphaMode::Fixed(x.as_f64().expect("checked"))
            }
            _ => p
                .problems
                .push("`alpha` must be a number or \"calibrated\"".into()),
        }
    }
    set(&mut cfg.penalty.warmup_steps, p.uint("warmup_steps").map(|v| v as u64));
    set(&mut cfg.penalty.symmetrize, p.bool("symmetrize"));
    set(&mut cfg.log_every, p.uint("log_every").map(|v| v as u64));
    set(&mut cfg.checkpoint_every, p.uint("checkpoint_every").map(|v| v as u64));

    let mut problems = p.problems;
    problems.extend(cfg.problems());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(problems))
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

enum List {
    One(usize),
    Many(Vec<usize>),
}

impl List {
    fn len(&self) -> Option<usize> {
        match self {
            List::One(_) => None,
            List::Many(v) => Some(v.len()),
        }
    }
}

/// Per-SAE values for `n` SAEs from a scalar, a list, or the preset.
fn resize(
    name: &str,
    given: Option<List>,
    preset: &[usize],
    n: usize,
    problems: &mut Vec<String>,
) -> Vec<usize> {
    match given {
        Some(List::One(v)) => vec![v; n],
        Some(List::Many(v)) => {
            if v.len() != n {
                problems.push(format!("`{name}` has {} entries for {n} SAEs", v.len()));
            }
            v
        }
        None if preset.len() == n => preset.to_vec(),
        None if !preset.is_empty() && preset.iter().all(|&x| x == preset[0]) => {
            vec![preset[0]; n]
        }
        None => {
            problems.push(format!(
                "`{name}` must be given explicitly: the preset has {} per-SAE values, {n} SAEs requested",
                preset.len()
            ));
            preset.to_vec()
        }
    }
}

struct Parser<'a> {
    map: &'a Map<String, Value>,
    problems: Vec<String>,
}

impl Parser<'_> {
    fn typed<T>(&mut self, key: &str, what: &str, get: impl Fn(&Value) -> Option<T>) -> Option<T> {
        let v = self.map.get(key)?;
        let out = get(v);
        if out.is_none() {
            self.problems.push(format!("`{key}` must be {what}, got {v}"));
        }
        out
    }

    fn uint(&mut self, key: &str) -> Option<usize> {
        self.typed(key, "a non-negative integer", |v| {
            v.as_u64().and_then(|x| usize::try_from(x).ok())
        })
    }

    fn u64(&mut self, key: &str) -> Option<u64> {
        self.typed(key, "a non-negative integer", Value::as_u64)
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        self.typed(key, "a number", Value::as_f64)
    }

    fn bool(&mut self, key: &str) -> Option<bool> {
        self.typed(key, "true or false", Value::as_bool)
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.typed(key, "a string", |v| v.as_str().map(str::to_owned))
    }

    fn uint_list(&mut self, key: &str) -> Option<List> {
        self.typed(key, "an integer or a list of integers", |v| match v {
            Value::Array(items) => items
                .iter()
                .map(|x| x.as_u64().and_then(|x| usize::try_from(x).ok()))
                .collect::<Option<Vec<_>>>()
                .map(List::Many),
            other => other
                .as_u64()
                .and_then(|x| usize::try_from(x).ok())
                .map(List::One),
        })
    }

    fn parsed<T: std::str::FromStr<Err = Error>>(&mut self, _key: &str, s: &str) -> Option<T> {
        match s.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.problems.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
                None
            }
        }
    }
}
