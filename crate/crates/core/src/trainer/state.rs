use crate::error::Result;
use crate::mfr::ActivationCounter;
use crate::numerics::{streams, AdamWConfig, AdamWState, RngStream};
use crate::sae::SaeParams;

/// Parameters and optimizer state at a probe, kept so a run that exhausts
/// its reinitialization attempts can fall back to its best initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub metric: f64,
    pub params: SaeParams,
    pub opt_w: AdamWState,
    pub opt_b: AdamWState,
}

/// Everything owned by one autoencoder of the ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeSlot {
    pub params: SaeParams,
    pub opt_w: AdamWState,
    pub opt_b: AdamWState,
    /// Activations since the last (re)initialization or probe.
    pub probe: ActivationCounter,
    /// Activations since the last logged record.
    pub window: ActivationCounter,
    /// Steps since the last (re)initialization.
    pub local_step: u64,
    /// Reinitializations performed so far.
    pub attempts: u32,
    /// Probing has ended for this autoencoder.
    pub settled: bool,
    pub best: Option<Box<Snapshot>>,
}

impl SaeSlot {
    /// Fresh autoencoder `index` of a run, drawn from its own init stream.
    pub fn init(
        index: usize,
        hidden: usize,
        dim: usize,
        k: usize,
        seed: u64,
        optimizer: AdamWConfig,
    ) -> Result<Self> {
        let mut rng = RngStream::new(seed, streams::sae_init(index, 0));
        let params = SaeParams::init(hidden, dim, k, &mut rng)?;
        Ok(Self::from_params(params, optimizer))
    }

    pub fn from_params(params: SaeParams, optimizer: AdamWConfig) -> Self {
        let h = params.hidden();
        SaeSlot {
            opt_w: AdamWState::new(h * params.dim(), optimizer),
            opt_b: AdamWState::new(h, optimizer),
            probe: ActivationCounter::new(h),
            window: ActivationCounter::new(h),
            local_step: 0,
            attempts: 0,
            settled: false,
            best: None,
            params,
        }
    }

    pub fn snapshot(&self, metric: f64) -> Snapshot {
        Snapshot {
            metric,
            params: self.params.clone(),
            opt_w: self.opt_w.clone(),
            opt_b: self.opt_b.clone(),
        }
    }

    /// Replaces parameters and resets optimizer and counters; attempts and
    /// the best snapshot carry over.
    pub fn restart(&mut self, params: SaeParams) {
        self.params = params;
        self.opt_w.reset();
        self.opt_b.reset();
        self.probe.reset();
        self.window.reset();
        self.local_step = 0;
    }

    pub fn set_optimizer(&mut self, optimizer: AdamWConfig) {
        self.opt_w.config = optimizer;
        self.opt_b.config = optimizer;
    }
}

/// Lockstep state of all autoencoders in a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub slots: Vec<SaeSlot>,
    /// Completed steps.
    pub step: u64,
    /// Penalty weight once known (fixed, or calibrated on the first step).
    pub alpha: Option<f64>,
}

impl EnsembleState {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn params(&self) -> impl Iterator<Item = &SaeParams> {
        self.slots.iter().map(|s| &s.params)
    }
}
