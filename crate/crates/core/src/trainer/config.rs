use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfr::{AlphaMode, PenaltyConfig, ReinitPolicy};
use crate::numerics::AdamWConfig;
use crate::synthgen::GenConfig;

/// Training objective of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reconstruction loss only.
    Baseline,
    /// Reconstruction loss plus the mutual penalty, with conditional
    /// reinitialization.
    Mfr,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "mfr" => Ok(Mode::Mfr),
            other => Err(Error::Config(format!(
                "mode must be `baseline` or `mfr`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Mfr => "mfr",
        })
    }
}

/// What to do when a finite activation file runs out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnExhaustion {
    /// Start again from the first row.
    Wrap,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(GenConfig),
    Activations {
        path: PathBuf,
        on_exhaustion: OnExhaustion,
    },
}

/// Named hyperparameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Two SAEs on the superposed synthetic data, `h = 512`, `k = 36`.
    PaperSynthetic,
    /// Five SAEs on 768-dimensional language-model activations,
    /// `h = 3072`, `k ∈ {6, 12, 18, 24, 30}`.
    PaperLm,
    /// Five SAEs on vectorized EEG, `h = 4096`, `k ∈ {12, 24, 36, 48, 60}`.
    PaperEeg,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::PaperSynthetic, Preset::PaperLm, Preset::PaperEeg];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperSynthetic => "paper-synthetic",
            Preset::PaperLm => "paper-lm",
            Preset::PaperEeg => "paper-eeg",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{s}`; expected one of paper-synthetic, paper-lm, paper-eeg"
                ))
            })
    }
}

/// Full description of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Hidden size of each SAE; its length is the ensemble size.
    pub hidden: Vec<usize>,
    /// TopK sparsity of each SAE.
    pub k: Vec<usize>,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub total_examples: u64,
    /// Stop after this many steps even if examples remain.
    pub max_steps: Option<u64>,
    pub source: DataSource,
    pub reinit: ReinitPolicy,
    pub use_reinit: bool,
    pub penalty: PenaltyConfig,
    pub use_penalty: bool,
    /// Write a metrics row every this many steps (reinit events always).
    pub log_every: u64,
    /// Write checkpoints every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Seed of the SAE initializations.
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, mode: Mode) -> Self {
        let activations = |path: &str| DataSource::Activations {
            path: PathBuf::from(path),
            on_exhaustion: OnExhaustion::Wrap,
        };
        let calibrated = PenaltyConfig {
            alpha: AlphaMode::Calibrated,
            warmup_steps: 100,
            symmetrize: false,
        };
        let mut cfg = match preset {
            Preset::PaperSynthetic => TrainConfig {
                mode,
                hidden: vec![512; 2],
                k: vec![36; 2],
                optimizer: AdamWConfig::default().with_learning_rate(0.01),
                batch_size: 10_000,
                total_examples: 100_000_000,
                max_steps: None,
                source: DataSource::Synthetic(GenConfig::paper_synthetic(0)),
                reinit: ReinitPolicy::default(),
                use_reinit: false,
                penalty: PenaltyConfig {
                    alpha: AlphaMode::Fixed(3.0),
                    warmup_steps: 100,
                    symmetrize: false,
                },
                use_penalty: false,
                log_every: 1,
                checkpoint_every: 1000,
                seed: 0,
            },
            Preset::PaperLm => TrainConfig {
                mode,
                hidden: vec![3072; 5],
                k: vec![6, 12, 18, 24, 30],
                optimizer: AdamWConfig::default().with_learning_rate(0.001),
                batch_size: 500,
                total_examples: 2_000_000,
                max_steps: None,
                source: activations("activations.mfra"),
                reinit: ReinitPolicy::default(),
                use_reinit: false,
                penalty: calibrated,
                use_penalty: false,
                log_every: 10,
                checkpoint_every: 1000,
                seed: 0,
            },
            Preset::PaperEeg => TrainConfig {
                mode,
                hidden: vec![4096; 5],
                k: vec![12, 24, 36, 48, 60],
                optimizer: AdamWConfig::default().with_learning_rate(0.001),
                batch_size: 1024,
                total_examples: 3_500_000,
                max_steps: None,
                source: activations("eeg.mfra"),
                reinit: ReinitPolicy::default(),
                use_reinit: false,
                penalty: calibrated,
                use_penalty: false,
                log_every: 10,
                checkpoint_every: 1000,
                seed: 0,
            },
        };
        cfg.set_mode(mode);
        cfg
    }

    /// Switches mode and turns both MFR mechanisms on or off with it.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.use_reinit = mode == Mode::Mfr;
        self.use_penalty = mode == Mode::Mfr;
    }

    pub fn n_saes(&self) -> usize {
        self.hidden.len()
    }

    /// Lockstep steps the run will take.
    pub fn steps(&self) -> u64 {
        let full = self.total_examples / self.batch_size.max(1) as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn reinit_policy(&self) -> Option<&ReinitPolicy> {
        self.use_reinit.then_some(&self.reinit)
    }

    pub fn penalty_config(&self) -> Option<&PenaltyConfig> {
        self.use_penalty.then_some(&self.penalty)
    }

    /// Every validation problem, in a fixed order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.n_saes();
        if n == 0 {
            out.push("at least one SAE is required".into());
        }
        if self.k.len() != n {
            out.push(format!("k has {} entries for {n} SAEs", self.k.len()));
        }
        if self.mode == Mode::Mfr && n < 2 {
            out.push(format!("mode mfr needs at least 2 SAEs, got {n}"));
        } else if self.use_penalty && n < 2 {
            out.push(format!("the penalty needs at least 2 SAEs, got {n}"));
        }
        for (i, (&h, &k)) in self.hidden.iter().zip(&self.k).enumerate() {
            if h == 0 {
                out.push(format!("SAE {i}: hidden size must be positive"));
            } else if k == 0 || k > h {
                out.push(format!("SAE {i}: k = {k} must lie in 1..={h}"));
            }
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        } else if self.total_examples < self.batch_size as u64 {
            out.push(format!(
                "total_examples ({}) must be at least batch_size ({})",
                self.total_examples, self.batch_size
            ));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            out.push("learning_rate must be positive".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            out.push("beta1 and beta2 must lie in [0,1)".into());
        }
        if !(o.epsilon > 0.0) {
            out.push("epsilon must be positive".into());
        }
        if !(o.weight_decay >= 0.0) {
            out.push("weight_decay must be non-negative".into());
        }
        if let DataSource::Synthetic(g) = &self.source {
            out.extend(g.problems());
        }
        if self.use_reinit {
            out.extend(self.reinit.problems());
        }
        if let AlphaMode::Fixed(a) = self.penalty.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                out.push("alpha must be a non-negative number or \"calibrated\"".into());
            }
        }
        if self.log_every == 0 {
            out.push("log_every must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}
