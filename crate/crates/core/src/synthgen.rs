//! Synthetic datasets of superposed features with a known dictionary.
//!
//! A ground-truth matrix `F` (d x G, Gaussian entries) holds one feature per
//! column. Features are split into contiguous groups. Each sample activates
//! `groups_per_sample` groups chosen uniformly at random, and inside each
//! active group draws `K` distinct features with probability proportional to
//! the exponentially decaying weights `p_j`. Active coefficients are uniform
//! on `(0, 1)` and the sample is `x = sum_j a_j f_j`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, streams, Matrix, RngStream, ROW_CHUNK};

/// Parameters of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Ambient dimension `d`.
    pub dim: usize,
    /// Feature count `G`.
    pub features: usize,
    /// Group count `E`.
    pub groups: usize,
    /// Active features per selected group, `K`.
    pub active_per_group: usize,
    /// Decay rate `λ` in `(0, 1)`.
    pub decay: f64,
    /// Groups activated per sample, in `1..=E`.
    pub groups_per_sample: usize,
    pub seed: u64,
}

impl GenConfig {
    /// `G = 512, d = 256, E = 12, K = 3, λ = 0.99` with every group active,
    /// giving 36 active features per sample.
    pub fn paper_synthetic(seed: u64) -> Self {
        GenConfig {
            dim: 256,
            features: 512,
            groups: 12,
            active_per_group: 3,
            decay: 0.99,
            groups_per_sample: 12,
            seed,
        }
    }

    /// Active features per sample, `K * groups_per_sample`.
    pub fn active_per_sample(&self) -> usize {
        self.active_per_group * self.groups_per_sample
    }

    /// Every validation problem, in a fixed order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dim == 0 {
            out.push("dim must be at least 1".to_string());
        }
        if self.features <= self.dim {
            out.push(format!(
                "features ({}) must exceed dim ({}) for superposition",
                self.features, self.dim
            ));
        }
        if self.groups == 0 || self.groups > self.features {
            out.push(format!(
                "groups ({}) must lie in 1..=features ({})",
                self.groups, self.features
            ));
        } else {
            let smallest = self.features / self.groups;
            if self.active_per_group == 0 || self.active_per_group > smallest {
                out.push(format!(
                    "active_per_group ({}) must lie in 1..={smallest} (smallest group size)",
                    self.active_per_group
                ));
            }
            if self.groups_per_sample == 0 || self.groups_per_sample > self.groups {
                out.push(format!(
                    "groups_per_sample ({}) must lie in 1..=groups ({})",
                    self.groups_per_sample, self.groups
                ));
            }
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            out.push("lambda must lie in (0,1)".to_string());
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

    /// Contiguous group index ranges. Sizes differ by at most one; the first
    /// `G mod E` groups hold the extra feature.
    pub fn group_ranges(&self) -> Vec<Range<usize>> {
        group_ranges(self.features, self.groups)
    }
}

fn group_ranges(features: usize, groups: usize) -> Vec<Range<usize>> {
    let base = features / groups;
    let extra = features % groups;
    let mut start = 0;
    (0..groups)
        .map(|e| {
            let len = base + usize::from(e < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// `p_j = λ^j / Σ_{k=1..G} λ^k` for `j = 1..=G` (returned 0-based).
pub fn feature_probabilities(features: usize, decay: f64) -> Result<Vec<f64>> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Config("lambda must lie in (0,1)".into()));
    }
    let raw: Vec<f64> = (1..=features).map(|j| decay.powi(j as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Ground-truth dictionary and its sampling metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    config: GenConfig,
    /// `d x G`, one feature per column.
    f: Matrix,
    /// `G x d`, one feature per row.
    features: Matrix,
    probs: Vec<f64>,
    groups: Vec<Range<usize>>,
}

impl FeatureMatrix {
    /// Wraps an existing `d x G` matrix, e.g. one read back from disk.
    pub fn from_parts(config: GenConfig, f: Matrix) -> Result<Self> {
        config.validate()?;
        if f.shape() != (config.dim, config.features) {
            return Err(Error::Dimension(format!(
                "feature matrix is {}x{}, config says {}x{}",
                f.rows(),
                f.cols(),
                config.dim,
                config.features
            )));
        }
        let probs = feature_probabilities(config.features, config.decay)?;
        let groups = config.group_ranges();
        let features = f.transpose();
        Ok(FeatureMatrix {
            config,
            f,
            features,
            probs,
            groups,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    /// Same features, sampled with a different number of active groups.
    pub fn with_groups_per_sample(self, groups_per_sample: usize) -> Result<Self> {
        let config = GenConfig {
            groups_per_sample,
            ..self.config
        };
        config.validate()?;
        Ok(FeatureMatrix { config, ..self })
    }

    /// The `d x G` matrix `F`.
    pub fn matrix(&self) -> &Matrix {
        &self.f
    }

    /// Features as rows (`G x d`), the layout used for similarity metrics.
    pub fn dictionary(&self) -> &Matrix {
        &self.features
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn group_of(&self, feature: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&feature))
            .expect("feature index out of range")
    }
}

/// Samples `F` with i.i.d. standard normal entries (columns are not
/// normalized), drawn in row-major order from the feature stream of
/// `cfg.seed`.
pub fn sample_feature_matrix(cfg: &GenConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, streams::FEATURES);
    let f = Matrix::from_vec(cfg.dim, cfg.features, rng.gaussian_vec(cfg.dim * cfg.features))?;
    FeatureMatrix::from_parts(cfg.clone(), f)
}

/// A batch of samples together with the coefficients that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    /// `n x d` samples.
    pub x: Matrix,
    /// Number of ground-truth features.
    pub features: usize,
    /// Active feature indices of all samples, ascending within a sample.
    pub active: Vec<usize>,
    /// Coefficient of each entry in `active`.
    pub coefficients: Vec<f64>,
    /// Active entries per sample.
    pub per_sample: usize,
}

impl DataBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Active `(feature, coefficient)` pairs of sample `i`.
    pub fn sample_active(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = i * self.per_sample..(i + 1) * self.per_sample;
        self.active[r.clone()]
            .iter()
            .copied()
            .zip(self.coefficients[r].iter().copied())
    }

    /// Dense `n x G` coefficient matrix `A`.
    pub fn coefficient_matrix(&self) -> Matrix {
        let mut a = Matrix::zeros(self.len(), self.features);
        for i in 0..self.len() {
            for (j, c) in self.sample_active(i) {
                a.set(i, j, c);
            }
        }
        a
    }
}

/// Draws `n` samples from the stream `(cfg.seed, batch index)`.
///
/// Index and coefficient draws are sequential on that one stream; the
/// linear combinations are then formed in parallel over fixed row chunks,
/// adding features in ascending index order.
pub fn sample_batch(fm: &FeatureMatrix, n: usize, batch_index: u64) -> Result<DataBatch> {
    let mut rng = RngStream::new(fm.config.seed, streams::batch(batch_index));
    sample_from_stream(fm, n, &mut rng)
}

/// Held-out samples from the evaluation stream `index`, disjoint from every
/// training batch.
pub fn sample_eval_batch(fm: &FeatureMatrix, n: usize, index: u64) -> Result<DataBatch> {
    let mut rng = RngStream::new(fm.config.seed, streams::eval(index));
    sample_from_stream(fm, n, &mut rng)
}

/// Draws `n` samples consuming `rng` sequentially.
pub fn sample_from_stream(fm: &FeatureMatrix, n: usize, rng: &mut RngStream) -> Result<DataBatch> {
    if n == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let cfg = &fm.config;
    let per_sample = cfg.active_per_sample();
    let mut active = Vec::with_capacity(n * per_sample);
    let mut coefficients = Vec::with_capacity(n * per_sample);

    let mut group_order: Vec<usize> = (0..cfg.groups).collect();
    let max_group = fm.groups.iter().map(|g| g.len()).max().unwrap_or(0);
    let mut weights = vec![0.0; max_group];
    let mut picked: Vec<usize> = Vec::with_capacity(per_sample);

    for _ in 0..n {
        picked.clear();
        let chosen: &mut [usize] = if cfg.groups_per_sample == cfg.groups {
            &mut group_order[..]
        } else {
            // Partial Fisher-Yates over a fresh ordering.
            for (i, g) in group_order.iter_mut().enumerate() {
                *g = i;
            }
            for i in 0..cfg.groups_per_sample {
                let j = i + rng.below(cfg.groups - i);
                group_order.swap(i, j);
            }
            &mut group_order[..cfg.groups_per_sample]
        };
        for &g in chosen.iter() {
            let range = fm.groups[g].clone();
            let w = &mut weights[..range.len()];
            w.copy_from_slice(&fm.probs[range.clone()]);
            for _ in 0..cfg.active_per_group {
                let slot = weighted_pick(w, rng);
                w[slot] = 0.0;
                picked.push(range.start + slot);
            }
        }
        picked.sort_unstable();
        for &j in &picked {
            active.push(j);
            coefficients.push(rng.uniform_open());
        }
    }

    let d = cfg.dim;
    let mut x = Matrix::zeros(n, d);
    x.as_mut_slice()
        .par_chunks_mut(ROW_CHUNK * d)
        .enumerate()
        .for_each(|(c, block)| {
            for (r, row) in block.chunks_exact_mut(d).enumerate() {
                let i = c * ROW_CHUNK + r;
                let span = i * per_sample..(i + 1) * per_sample;
                for (&j, &a) in active[span.clone()].iter().zip(&coefficients[span]) {
                    axpy(a, fm.features.row(j), row);
                }
            }
        });

    Ok(DataBatch {
        x,
        features: cfg.features,
        active,
        coefficients,
        per_sample,
    })
}

/// Index drawn with probability proportional to `weights` (zeros excluded).
fn weighted_pick(weights: &[f64], rng: &mut RngStream) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if target < acc {
                return i;
            }
        }
    }
    // Rounding can leave `target` at the very top of the range.
    last
}

/// Endless sequence of batches keyed by batch index.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    fm: FeatureMatrix,
}

impl SyntheticSource {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        Ok(SyntheticSource {
            fm: sample_feature_matrix(cfg)?,
        })
    }

    pub fn from_features(fm: FeatureMatrix) -> Self {
        SyntheticSource { fm }
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.fm
    }

    pub fn batch(&self, index: u64, n: usize) -> Result<DataBatch> {
        sample_batch(&self.fm, n, index)
    }
}
