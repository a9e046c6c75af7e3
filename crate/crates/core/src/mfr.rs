//! Mutual feature regularization.
//!
//! Two mechanisms couple autoencoders trained side by side on the same data:
//!
//! * **Conditional reinitialization.** After a probe window the empirical
//!   activation frequency of every hidden unit is compared with the uniform
//!   rate `k/N`. If the mean relative deviation reaches the threshold, the
//!   autoencoder is re-drawn from its initial distribution.
//! * **Auxiliary penalty.** `α / C(N,2) · Σ_{i<j} (1 - MMCS(W_i, W_j))`
//!   pulls the dictionaries towards shared features. Its gradient is taken
//!   with the argmax partners of the current step held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{normalize_rows, row_max, SimilarityTable};
use crate::numerics::{axpy, dot, matmul_nt, Matrix, RngStream};
use crate::sae::{ForwardTrace, SaeParams};

/// Per-unit activation counts since the last reset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationCounter {
    pub counts: Vec<u64>,
    pub samples: u64,
}

impl ActivationCounter {
    pub fn new(hidden: usize) -> Self {
        ActivationCounter {
            counts: vec![0; hidden],
            samples: 0,
        }
    }

    pub fn record(&mut self, trace: &ForwardTrace) {
        for &j in &trace.active {
            self.counts[j] += 1;
        }
        self.samples += trace.len() as u64;
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.samples = 0;
    }

    pub fn hidden(&self) -> usize {
        self.counts.len()
    }

    /// Fraction of samples in which each unit was active.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.samples.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Mean relative deviation of unit activation frequencies from `k/N`:
/// `(1/N) Σ_i |f_i - k/N| / (k/N)`.
///
/// 0 when every unit fires equally often; `2 (N - k) / N` when the same `k`
/// units win every sample.
pub fn inactivity_metric(counter: &ActivationCounter, k: usize) -> Result<f64> {
    if counter.samples == 0 {
        return Err(Error::EmptyWindow);
    }
    let n = counter.hidden();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must lie in 1..={n}")));
    }
    let uniform = k as f64 / n as f64;
    let total: f64 = counter
        .frequencies()
        .iter()
        .map(|f| (f - uniform).abs() / uniform)
        .sum();
    Ok(total / n as f64)
}

/// When and how often to probe for inactive features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinitPolicy {
    /// Steps after each (re)initialization at which the metric is checked.
    pub probe_steps: u64,
    pub threshold: f64,
    pub max_attempts: u32,
    /// Probe again every `probe_steps` instead of once per initialization.
    pub reprobe: bool,
}

impl Default for ReinitPolicy {
    fn default() -> Self {
        ReinitPolicy {
            probe_steps: 100,
            threshold: 1.0,
            max_attempts: 10,
            reprobe: false,
        }
    }
}

impl ReinitPolicy {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.probe_steps == 0 {
            out.push("reinit.probe_steps must be at least 1".to_string());
        }
        if !(self.threshold > 0.0) {
            out.push("reinit.threshold must be positive".to_string());
        }
        out
    }

    /// Whether `local_step` (steps since the current initialization) is a
    /// probe point.
    pub fn is_probe_step(&self, local_step: u64) -> bool {
        if self.reprobe {
            local_step > 0 && local_step % self.probe_steps == 0
        } else {
            local_step == self.probe_steps
        }
    }
}

/// Outcome of a probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReinitDecision {
    Keep,
    Reinitialize,
    /// Over threshold but out of attempts: keep the best initialization
    /// seen so far.
    Capped,
}

/// Reinitialize iff this is a probe step, the metric reaches the threshold,
/// and attempts remain.
pub fn should_reinitialize(
    metric: f64,
    policy: &ReinitPolicy,
    local_step: u64,
    attempts: u32,
) -> ReinitDecision {
    if !policy.is_probe_step(local_step) || metric < policy.threshold {
        ReinitDecision::Keep
    } else if attempts < policy.max_attempts {
        ReinitDecision::Reinitialize
    } else {
        ReinitDecision::Capped
    }
}

/// Fresh parameters of the same shape and sparsity.
pub fn reinitialize(p: &SaeParams, rng: &mut RngStream) -> Result<SaeParams> {
    SaeParams::init(p.hidden(), p.dim(), p.k, rng)
}

/// How the penalty weight is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlphaMode {
    Fixed(f64),
    /// Set on the first batch so the penalty equals the reconstruction loss.
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub alpha: AlphaMode,
    pub warmup_steps: u64,
    /// Average both MMCS directions instead of the ordered `i < j` form.
    pub symmetrize: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            alpha: AlphaMode::Fixed(3.0),
            warmup_steps: 100,
            symmetrize: false,
        }
    }
}

/// `α = initial_loss / initial_raw_penalty`.
pub fn calibrate_alpha(initial_recon_loss: f64, initial_raw_penalty: f64) -> Result<f64> {
    if !(initial_raw_penalty > 1e-12) {
        return Err(Error::Calibration(initial_raw_penalty));
    }
    Ok(initial_recon_loss / initial_raw_penalty)
}

/// `α (1 - cos(π min(step / warmup, 1))) / 2`; `α` throughout when
/// `warmup == 0`.
pub fn warmup_coefficient(step: u64, warmup: u64, alpha: f64) -> f64 {
    if warmup == 0 || step >= warmup {
        return alpha;
    }
    let t = step as f64 / warmup as f64;
    alpha * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
}

/// Penalty value, its pieces, and its gradient for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyEval {
    /// `(1 / C(N,2)) Σ_{i<j} (1 - MMCS)`, i.e. the penalty at `α = 1`.
    pub raw: f64,
    /// `α_eff · raw`.
    pub value: f64,
    /// `mmcs[i][j]`: MMCS of dictionary `i` against `j` (diagonal 1).
    pub mmcs: Vec<Vec<f64>>,
    /// Gradient with respect to each dictionary; empty unless requested.
    pub grads: Vec<Matrix>,
}

impl PenaltyEval {
    /// Mean MMCS of dictionary `i` against every other dictionary.
    pub fn mean_mmcs_of(&self, i: usize) -> f64 {
        let n = self.mmcs.len();
        if n < 2 {
            return f64::NAN;
        }
        (0..n).filter(|&j| j != i).map(|j| self.mmcs[i][j]).sum::<f64>() / (n - 1) as f64
    }
}

/// `α / C(N,2) Σ_{i<j} (1 - MMCS(W_i, W_j))`.
pub fn mfr_penalty(weights: &[&Matrix], alpha_eff: f64) -> Result<f64> {
    Ok(evaluate_penalty(weights, alpha_eff, false, false)?.value)
}

/// Gradient of [`mfr_penalty`] with each feature's argmax partner held
/// fixed. Both members of every matched pair receive gradient.
pub fn penalty_gradient(weights: &[&Matrix], alpha_eff: f64) -> Result<Vec<Matrix>> {
    Ok(evaluate_penalty(weights, alpha_eff, false, true)?.grads)
}

/// Penalty, MMCS matrix and optionally the gradient, in one pass.
///
/// With `symmetrize`, each pair contributes `1 - (MMCS(i,j) + MMCS(j,i)) / 2`.
///
/// For a feature `a` matched to `b` with cosine `c`,
/// `∂c/∂a = (b̂ - c â) / |a|` and symmetrically for `b`. Pairs involving a
/// zero-norm feature have similarity 0 and contribute no gradient.
pub fn evaluate_penalty(
    weights: &[&Matrix],
    alpha_eff: f64,
    symmetrize: bool,
    with_grads: bool,
) -> Result<PenaltyEval> {
    let n = weights.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "the penalty needs at least 2 dictionaries, got {n}"
        )));
    }
    let dim = weights[0].cols();
    for (i, w) in weights.iter().enumerate() {
        if w.cols() != dim {
            return Err(Error::Dimension(format!(
                "dictionary {i} has width {}, dictionary 0 has {dim}",
                w.cols()
            )));
        }
        if w.rows() == 0 {
            return Err(Error::Dimension(format!("dictionary {i} is empty")));
        }
    }

    let units: Vec<Matrix> = weights.iter().map(|w| normalize_rows(w)).collect();
    let norms: Vec<Vec<f64>> = weights
        .iter()
        .map(|w| w.row_iter().map(|r| dot(r, r).sqrt()).collect())
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    let mut grads: Vec<Matrix> = if with_grads {
        weights.iter().map(|w| Matrix::zeros(w.rows(), dim)).collect()
    } else {
        Vec::new()
    };
    let mut mmcs = vec![vec![1.0; n]; n];
    let mut raw = 0.0;

    for i in 0..n {
        for j in (i + 1)..n {
            let table = SimilarityTable {
                sims: matmul_nt(&units[i], &units[j]).map(|v| v.clamp(-1.0, 1.0)),
            };
            let fwd = row_max(&table);
            mmcs[i][j] = fwd.iter().map(|p| p.1).sum::<f64>() / weights[i].rows() as f64;
            let need_back = symmetrize || with_grads;
            let back = if need_back {
                let t = SimilarityTable {
                    sims: table.sims.transpose(),
                };
                let b = row_max(&t);
                mmcs[j][i] = b.iter().map(|p| p.1).sum::<f64>() / weights[j].rows() as f64;
                Some(b)
            } else {
                mmcs[j][i] = f64::NAN;
                None
            };

            let similarity = if symmetrize {
                0.5 * (mmcs[i][j] + mmcs[j][i])
            } else {
                mmcs[i][j]
            };
            raw += 1.0 - similarity;

            if with_grads {
                let weight = if symmetrize { 0.5 } else { 1.0 };
                // d(value)/d(cos) for one row of dictionary i.
                let coef = -alpha_eff * weight / pairs / weights[i].rows() as f64;
                accumulate_pair_grad(
                    &fwd, coef, &units, &norms, i, j, &mut grads,
                );
                if symmetrize {
                    let coef = -alpha_eff * weight / pairs / weights[j].rows() as f64;
                    accumulate_pair_grad(
                        back.as_ref().expect("computed above"),
                        coef,
                        &units,
                        &norms,
                        j,
                        i,
                        &mut grads,
                    );
                }
            }
        }
    }
    if !symmetrize {
        // Only the ordered direction was needed; fill the other for reports.
        for i in 0..n {
            for j in 0..i {
                if mmcs[i][j].is_nan() {
                    let table = SimilarityTable {
                        sims: matmul_nt(&units[i], &units[j]).map(|v| v.clamp(-1.0, 1.0)),
                    };
                    mmcs[i][j] = row_max(&table).iter().map(|p| p.1).sum::<f64>()
                        / weights[i].rows() as f64;
                }
            }
        }
    }
    let raw = raw / pairs;
    Ok(PenaltyEval {
        raw,
        value: alpha_eff * raw,
        mmcs,
        grads,
    })
}

/// Adds `coef · ∂cos(a_r, b_{p(r)})` for every row `r` of dictionary `a`
/// and its partner `p(r)` in dictionary `b`.
fn accumulate_pair_grad(
    partners: &[(usize, f64)],
    coef: f64,
    units: &[Matrix],
    norms: &[Vec<f64>],
    a: usize,
    b: usize,
    grads: &mut [Matrix],
) {
    for (r, &(p, cos)) in partners.iter().enumerate() {
        let (na, nb) = (norms[a][r], norms[b][p]);
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let (ua, ub) = (units[a].row(r), units[b].row(p));
        {
            let g = grads[a].row_mut(r);
            axpy(coef / na, ub, g);
            axpy(-coef * cos / na, ua, g);
        }
        let g = grads[b].row_mut(p);
        axpy(coef / nb, ua, g);
        axpy(-coef * cos / nb, ub, g);
    }
}
