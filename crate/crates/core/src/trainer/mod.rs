//! Lockstep training of an SAE ensemble.
//!
//! Every step all autoencoders see the same batch. Forward and backward
//! passes run concurrently; the penalty, which reads every dictionary, is
//! evaluated after all of them finish; then each autoencoder takes one
//! AdamW step on the sum of its reconstruction and penalty gradients,
//! updates its activation counters, and is probed for inactivity.
//!
//! All reductions have a fixed order and every random draw comes from a
//! stream keyed by seed and role, so a run is bit-identical for any size of
//! the rayon pool.

mod config;
mod state;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{DataSource, Mode, OnExhaustion, Preset, TrainConfig};
pub use state::{EnsembleState, SaeSlot, Snapshot};

use crate::error::{Error, Result};
use crate::mfr::{
    calibrate_alpha, evaluate_penalty, inactivity_metric, reinitialize, should_reinitialize,
    AlphaMode, PenaltyEval, ReinitDecision,
};
use crate::numerics::{axpy, mean, streams, Matrix, RngStream};
use crate::sae::{backward, forward, reconstruction_loss, ForwardTrace, Gradients, SaeParams};
use crate::storefmt::{write_checkpoint, ActivationReader, Checkpoint, MetricsRecord, MetricsWriter};
use crate::synthgen::{sample_eval_batch, FeatureMatrix, SyntheticSource};

/// Batches addressed by step index, so a resumed run sees the same data.
pub trait BatchSource: Send {
    fn dim(&self) -> usize;
    fn batch(&mut self, index: u64, n: usize) -> Result<Matrix>;
    /// Ground truth, when the data is synthetic.
    fn features(&self) -> Option<&FeatureMatrix> {
        None
    }
    /// Samples not used for training, for activation statistics.
    fn held_out(&mut self, n: usize) -> Result<Matrix>;
}

impl BatchSource for SyntheticSource {
    fn dim(&self) -> usize {
        self.features().config().dim
    }

    fn batch(&mut self, index: u64, n: usize) -> Result<Matrix> {
        Ok(SyntheticSource::batch(self, index, n)?.x)
    }

    fn features(&self) -> Option<&FeatureMatrix> {
        Some(SyntheticSource::features(self))
    }

    fn held_out(&mut self, n: usize) -> Result<Matrix> {
        Ok(sample_eval_batch(SyntheticSource::features(self), n, 0)?.x)
    }
}

/// Batches read from an activation file; batch `i` covers rows
/// `i·n .. (i+1)·n`, wrapping around or failing at the end of the file.
pub struct FileSource {
    reader: ActivationReader<BufReader<File>>,
    path: PathBuf,
    on_exhaustion: OnExhaustion,
}

impl FileSource {
    pub fn open(path: impl AsRef<Path>, on_exhaustion: OnExhaustion) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let reader = ActivationReader::open(&path)?;
        if reader.is_empty() {
            return Err(Error::DataExhausted(format!(
                "{} holds no rows",
                path.display()
            )));
        }
        Ok(FileSource {
            reader,
            path,
            on_exhaustion,
        })
    }
}

impl BatchSource for FileSource {
    fn dim(&self) -> usize {
        self.reader.dim()
    }

    fn batch(&mut self, index: u64, n: usize) -> Result<Matrix> {
        let count = self.reader.len();
        let start = index
            .checked_mul(n as u64)
            .ok_or_else(|| Error::DataExhausted("row index overflows".into()))?;
        if self.on_exhaustion == OnExhaustion::Error && start + n as u64 > count {
            return Err(Error::DataExhausted(format!(
                "step {index} needs rows {start}..{} but {} holds {count}",
                start + n as u64,
                self.path.display()
            )));
        }
        let mut data = Vec::with_capacity(n * self.dim());
        let mut row = start % count;
        let mut left = n;
        while left > 0 {
            let take = left.min((count - row) as usize);
            data.extend(self.reader.read_rows(row, take)?.into_vec());
            left -= take;
            row = 0;
        }
        Matrix::from_vec(n, self.dim(), data)
    }

    fn held_out(&mut self, n: usize) -> Result<Matrix> {
        let n = n.min(self.reader.len() as usize);
        self.reader.read_rows(self.reader.len() - n as u64, n)
    }
}

pub fn open_source(source: &DataSource) -> Result<Box<dyn BatchSource>> {
    Ok(match source {
        DataSource::Synthetic(g) => Box::new(SyntheticSource::new(g)?),
        DataSource::Activations {
            path,
            on_exhaustion,
        } => Box::new(FileSource::open(path, *on_exhaustion)?),
    })
}

/// Result of one inactivity probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    /// Global step during which the probe happened.
    pub step: u64,
    pub sae_id: usize,
    /// Reinitializations done before this probe.
    pub attempt: u32,
    pub metric: f64,
    pub decision: ReinitDecision,
}

pub struct TrainOutcome {
    pub state: EnsembleState,
    pub log: Vec<MetricsRecord>,
    pub probes: Vec<ProbeRecord>,
    pub features: Option<FeatureMatrix>,
}

pub struct Trainer {
    cfg: TrainConfig,
    source: Box<dyn BatchSource>,
    state: EnsembleState,
    log: Vec<MetricsRecord>,
    probes: Vec<ProbeRecord>,
    sink: Option<MetricsWriter>,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let source = open_source(&cfg.source)?;
        Self::with_source(cfg, source)
    }

    /// Trains on an already opened source.
    pub fn with_source(cfg: TrainConfig, source: Box<dyn BatchSource>) -> Result<Self> {
        cfg.validate()?;
        let dim = source.dim();
        let slots = cfg
            .hidden
            .iter()
            .zip(&cfg.k)
            .enumerate()
            .map(|(i, (&h, &k))| SaeSlot::init(i, h, dim, k, cfg.seed, cfg.optimizer))
            .collect::<Result<Vec<_>>>()?;
        let alpha = match cfg.penalty.alpha {
            AlphaMode::Fixed(a) => Some(a),
            AlphaMode::Calibrated => None,
        };
        Ok(Trainer {
            state: EnsembleState {
                slots,
                step: 0,
                alpha,
            },
            cfg,
            source,
            log: Vec::new(),
            probes: Vec::new(),
            sink: None,
            checkpoint_dir: None,
        })
    }

    /// Continues a run from one checkpoint per SAE.
    ///
    /// Checkpoints carrying the exact training state resume bit-identically.
    /// Without it, training restarts from the `f32` parameters (and moments,
    /// if stored); this works but does not reproduce an uninterrupted run.
    pub fn resume(cfg: TrainConfig, checkpoints: Vec<Checkpoint>) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.restore(checkpoints)?;
        Ok(t)
    }

    fn restore(&mut self, checkpoints: Vec<Checkpoint>) -> Result<()> {
        let n = self.cfg.n_saes();
        if checkpoints.len() != n {
            return Err(Error::Checkpoint(format!(
                "{} checkpoints for {n} SAEs",
                checkpoints.len()
            )));
        }
        let step = checkpoints[0].step;
        let dim = self.source.dim();
        for (i, ck) in checkpoints.iter().enumerate() {
            let p = &ck.params;
            if ck.step != step {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {i} is at step {}, checkpoint 0 at step {step}",
                    ck.step
                )));
            }
            if p.dim() != dim || p.hidden() != self.cfg.hidden[i] || p.k != self.cfg.k[i] {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {i} has h={} d={} k={}, the run expects h={} d={dim} k={}",
                    p.hidden(),
                    p.dim(),
                    p.k,
                    self.cfg.hidden[i],
                    self.cfg.k[i]
                )));
            }
        }
        let exact = checkpoints.iter().all(|c| c.exact.is_some());
        let mut alpha = self.state.alpha;
        let mut slots = Vec::with_capacity(n);
        for ck in checkpoints {
            let slot = match (ck.exact, ck.moments) {
                (Some(ex), _) if exact => {
                    alpha = alpha.or(ex.alpha);
                    let mut slot = ex.slot;
                    slot.set_optimizer(self.cfg.optimizer);
                    slot
                }
                (_, moments) => {
                    let mut slot = SaeSlot::from_params(ck.params, self.cfg.optimizer);
                    match moments {
                        Some(m) => {
                            log::warn!(
                                "resuming from f32 parameters and moments; the run will not \
                                 match an uninterrupted one bit for bit"
                            );
                            let (w, b) = m.into_states(ck.step, self.cfg.optimizer);
                            slot.opt_w = w;
                            slot.opt_b = b;
                        }
                        None => log::warn!(
                            "checkpoint has no optimizer moments; resuming with fresh optimizer state"
                        ),
                    }
                    slot.local_step = ck.step;
                    slot.settled = true;
                    slot
                }
            };
            slots.push(slot);
        }
        self.state = EnsembleState { slots, step, alpha };
        Ok(())
    }

    /// Appends metrics rows to `path` as they are produced.
    pub fn with_metrics(mut self, path: impl AsRef<Path>) -> Result<Self> {
        self.sink = Some(MetricsWriter::open(path)?);
        Ok(self)
    }

    /// Writes checkpoints into `dir`.
    pub fn with_checkpoints(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.checkpoint_dir = Some(dir);
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnsembleState {
        &self.state
    }

    pub fn log(&self) -> &[MetricsRecord] {
        &self.log
    }

    pub fn probes(&self) -> &[ProbeRecord] {
        &self.probes
    }

    pub fn source_mut(&mut self) -> &mut dyn BatchSource {
        self.source.as_mut()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.steps()
    }

    /// Runs the remaining steps and writes the final checkpoints.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let total = self.cfg.steps();
        let every = (total / 20).max(1);
        while !self.is_done() {
            self.step()?;
            let s = self.state.step;
            if s % every == 0 || s == total {
                if let Some(last) = self.log.last() {
                    log::info!("step {s}/{total}: recon loss {:.6}", last.recon_loss);
                }
            }
        }
        self.write_checkpoints(None)?;
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            features: self.source.features().cloned(),
            state: self.state,
            log: self.log,
            probes: self.probes,
        }
    }

    /// Writes one checkpoint per SAE, named by step when `step` is given.
    pub fn write_checkpoints(&self, step: Option<u64>) -> Result<Vec<PathBuf>> {
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(Vec::new());
        };
        let mut paths = Vec::new();
        for (i, slot) in self.state.slots.iter().enumerate() {
            let name = match step {
                Some(s) => format!("sae{i}-step{s:08}.mfrc"),
                None => format!("sae{i}.mfrc"),
            };
            let path = dir.join(name);
            write_checkpoint(&path, &Checkpoint::from_slot(slot, self.state.step, self.state.alpha))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// One lockstep step.
    pub fn step(&mut self) -> Result<()> {
        let s = self.state.step;
        let cfg = &self.cfg;
        let n = self.state.len();
        let x = self.source.batch(s, cfg.batch_size)?;

        let passes = self
            .state
            .slots
            .par_iter()
            .enumerate()
            .map(|(i, slot)| {
                let ctx = |e: Error| numeric_context(e, s, i);
                let trace = forward(&slot.params, &x).map_err(ctx)?;
                let loss = reconstruction_loss(&x, &trace.recon).map_err(ctx)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite reconstruction loss at step {s} in SAE {i}"
                    )));
                }
                let grads = backward(&slot.params, &trace, &x).map_err(ctx)?;
                Ok((trace, loss, grads))
            })
            .collect::<Result<Vec<(ForwardTrace, f64, Gradients)>>>()?;
        let (traces, rest): (Vec<_>, Vec<_>) = passes.into_iter().map(|(t, l, g)| (t, (l, g))).unzip();
        let (losses, mut grads): (Vec<f64>, Vec<Gradients>) = rest.into_iter().unzip();

        // Penalty barrier.
        let policy = cfg.reinit_policy();
        let log_step = s % cfg.log_every == 0 || s + 1 == cfg.steps();
        let probe_due = policy.is_some_and(|p| {
            self.state
                .slots
                .iter()
                .any(|sl| !sl.settled && p.is_probe_step(sl.local_step + 1))
        });
        let mut alpha_eff = 0.0;
        let eval: Option<PenaltyEval> = if n < 2 {
            None
        } else if let Some(pc) = cfg.penalty_config() {
            let weights: Vec<&Matrix> = self.state.slots.iter().map(|sl| &sl.params.w).collect();
            let alpha = match self.state.alpha {
                Some(a) => a,
                None => {
                    let raw = evaluate_penalty(&weights, 1.0, pc.symmetrize, false)?.raw;
                    let a = calibrate_alpha(mean(&losses), raw)?;
                    log::info!("calibrated alpha = {a:.6} at step {s}");
                    self.state.alpha = Some(a);
                    a
                }
            };
            alpha_eff = crate::mfr::warmup_coefficient(s, pc.warmup_steps, alpha);
            let eval = evaluate_penalty(&weights, alpha_eff, pc.symmetrize, true)?;
            for (g, pg) in grads.iter_mut().zip(&eval.grads) {
                axpy(1.0, pg.as_slice(), g.w.as_mut_slice());
            }
            Some(eval)
        } else if log_step || probe_due {
            let weights: Vec<&Matrix> = self.state.slots.iter().map(|sl| &sl.params.w).collect();
            Some(evaluate_penalty(&weights, 0.0, false, false)?)
        } else {
            None
        };

        // Optimizer, counters.
        let windows = self
            .state
            .slots
            .par_iter_mut()
            .zip(grads.par_iter())
            .zip(traces.par_iter())
            .enumerate()
            .map(|(i, ((slot, g), trace))| {
                let ctx = |e: Error| numeric_context(e, s, i);
                slot.opt_w
                    .step(slot.params.w.as_mut_slice(), g.w.as_slice())
                    .map_err(ctx)?;
                slot.opt_b.step(&mut slot.params.b, &g.b).map_err(ctx)?;
                slot.probe.record(trace);
                slot.window.record(trace);
                slot.local_step += 1;
                Ok(inactivity_metric(&slot.window, slot.params.k).unwrap_or(f64::NAN))
            })
            .collect::<Result<Vec<f64>>>()?;

        // Probes.
        let mut reinit = vec![false; n];
        if let Some(policy) = policy {
            for (i, slot) in self.state.slots.iter_mut().enumerate() {
                if slot.settled || !policy.is_probe_step(slot.local_step) {
                    continue;
                }
                let metric = inactivity_metric(&slot.probe, slot.params.k)?;
                let decision = should_reinitialize(metric, policy, slot.local_step, slot.attempts);
                self.probes.push(ProbeRecord {
                    step: s,
                    sae_id: i,
                    attempt: slot.attempts,
                    metric,
                    decision,
                });
                match decision {
                    ReinitDecision::Reinitialize => {
                        if slot.best.as_ref().map_or(true, |b| metric < b.metric) {
                            slot.best = Some(Box::new(slot.snapshot(metric)));
                        }
                        slot.attempts += 1;
                        let mut rng =
                            RngStream::new(cfg.seed, streams::sae_init(i, slot.attempts));
                        let fresh = reinitialize(&slot.params, &mut rng)?;
                        slot.restart(fresh);
                        reinit[i] = true;
                        log::info!(
                            "step {s}: SAE {i} inactivity {metric:.4}, reinitialized (attempt {})",
                            slot.attempts
                        );
                    }
                    ReinitDecision::Capped => {
                        if let Some(best) = slot.best.take() {
                            if best.metric < metric {
                                slot.params = best.params;
                                slot.opt_w = best.opt_w;
                                slot.opt_b = best.opt_b;
                            }
                        }
                        slot.settled = true;
                        log::warn!(
                            "step {s}: SAE {i} still inactive ({metric:.4}) after {} \
                             reinitializations; keeping the best initialization",
                            slot.attempts
                        );
                    }
                    ReinitDecision::Keep => slot.settled = !policy.reprobe,
                }
                slot.probe.reset();
            }
        }

        // Metrics.
        for (i, slot) in self.state.slots.iter_mut().enumerate() {
            if !(log_step || reinit[i]) {
                continue;
            }
            let record = MetricsRecord {
                step: s,
                sae_id: i,
                recon_loss: losses[i],
                penalty_raw: eval.as_ref().map_or(f64::NAN, |e| e.raw),
                alpha_eff,
                mmcs_mean: eval.as_ref().map_or(f64::NAN, |e| e.mean_mmcs_of(i)),
                inactivity: windows[i],
                reinit_event: reinit[i],
            };
            if let Some(sink) = &mut self.sink {
                sink.write(&record)?;
            }
            self.log.push(record);
            slot.window.reset();
        }

        self.state.step += 1;
        let step = self.state.step;
        if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
            self.write_checkpoints(Some(step))?;
        }
        Ok(())
    }
}

fn numeric_context(e: Error, step: u64, sae: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}, SAE {sae}: {m}")),
        other => other,
    }
}

pub fn train(cfg: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(cfg)?.run()
}

/// Two baseline SAEs plus what the similarity analysis needs from them.
pub struct PairAnalysis {
    pub outcome: TrainOutcome,
    /// Activation frequency of every unit of each SAE on held-out samples.
    pub frequencies: [Vec<f64>; 2],
}

impl PairAnalysis {
    pub fn params(&self) -> [&SaeParams; 2] {
        [
            &self.outcome.state.slots[0].params,
            &self.outcome.state.slots[1].params,
        ]
    }
}

/// Trains two SAEs without the penalty and measures how often each unit
/// fires on `probe_samples` held-out samples.
pub fn train_baseline_pair_for_analysis(
    cfg: TrainConfig,
    probe_samples: usize,
) -> Result<PairAnalysis> {
    if cfg.n_saes() != 2 || cfg.use_penalty {
        return Err(Error::Config(
            "pair analysis needs exactly two SAEs trained without the penalty".into(),
        ));
    }
    let mut trainer = Trainer::new(cfg)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    let x = trainer.source_mut().held_out(probe_samples)?;
    let outcome = trainer.finish();
    let freq = |i: usize| crate::evalrep::activation_frequencies(&outcome.state.slots[i].params, &x);
    let frequencies = [freq(0)?, freq(1)?];
    Ok(PairAnalysis {
        outcome,
        frequencies,
    })
}
