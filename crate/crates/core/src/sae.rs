//! TopK sparse autoencoder with a tied decoder.
//!
//! `x̂ = Wᵀ σ_k(W x + b)` where `W` is `h x d`, `b` has length `h`, and
//! `σ_k` keeps the `k` largest pre-activations of each sample. There is no
//! decoder bias and no input centring. Row `j` of `W` is both the encoder
//! filter and the decoder direction of hidden unit `j`, so the rows of `W`
//! are the learned dictionary.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, matmul_nt, Matrix, RngStream, ROW_CHUNK};

/// Encoder weights, bias and sparsity of one autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeParams {
    /// `h x d`; the decoder is its transpose.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub k: usize,
}

impl SaeParams {
    pub fn new(w: Matrix, b: Vec<f64>, k: usize) -> Result<Self> {
        if w.cols() == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if b.len() != w.rows() {
            return Err(Error::Dimension(format!(
                "bias has {} entries for {} hidden units",
                b.len(),
                w.rows()
            )));
        }
        if k == 0 || k > w.rows() {
            return Err(Error::Config(format!(
                "k = {k} must lie in 1..={}",
                w.rows()
            )));
        }
        Ok(SaeParams { w, b, k })
    }

    /// Weights uniform in `[-1/sqrt(d), 1/sqrt(d)]`, zero bias.
    pub fn init(hidden: usize, dim: usize, k: usize, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..hidden * dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        SaeParams::new(Matrix::from_vec(hidden, dim, data)?, vec![0.0; hidden], k)
    }

    pub fn hidden(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    /// Learned features, one per row.
    pub fn dictionary(&self) -> &Matrix {
        &self.w
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|v| v.is_finite())
    }
}

/// Order used to rank pre-activations: larger first, lower index on ties.
#[inline]
fn rank(v: &[f64], a: usize, b: usize) -> Ordering {
    v[b].partial_cmp(&v[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest entries of `v`, ascending.
///
/// Ties at the threshold go to the lowest index, so exactly `k` survive.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds vector length {}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    select_top(v, k, &mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

fn select_top(v: &[f64], k: usize, idx: &mut [usize]) {
    if k > 0 && k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(v, a, b));
    }
}

/// Writes the indices of the `k` largest entries of `v` into `idx[..k]` in
/// ascending order, with the same tie rule as [`topk_indices`]. Selecting on
/// a copy of the values and scanning once is much faster than selecting on
/// indices.
fn top_ascending(v: &[f64], k: usize, scratch: &mut Vec<f64>, idx: &mut Vec<usize>) {
    idx.clear();
    if k == 0 {
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(v);
    let (_, &mut t, _) =
        scratch.select_nth_unstable_by(k - 1, |a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let above = v.iter().filter(|&&x| x > t).count();
    let mut ties = k.saturating_sub(above);
    for (j, &x) in v.iter().enumerate() {
        if x > t {
            idx.push(j);
        } else if x == t && ties > 0 {
            idx.push(j);
            ties -= 1;
        }
    }
    if idx.len() != k {
        // Unordered values (NaN); fall back to the reference rule.
        idx.clear();
        idx.extend(0..v.len());
        select_top(v, k, idx);
        idx.truncate(k);
        idx.sort_unstable();
    }
}

/// Keeps the `k` largest entries of `v` and zeroes the rest.
pub fn topk(v: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let idx = topk_indices(v, k)?;
    let mut out = vec![0.0; v.len()];
    for &i in &idx {
        out[i] = v[i];
    }
    Ok((out, idx))
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `W x + b`, `n x h`.
    pub pre: Matrix,
    /// `k` active unit indices per sample, ascending within a sample.
    pub active: Vec<usize>,
    /// Hidden value of each entry of `active`.
    pub values: Vec<f64>,
    /// `x̂`, `n x d`.
    pub recon: Matrix,
    pub k: usize,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.pre.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.rows() == 0
    }

    pub fn active_of(&self, sample: usize) -> &[usize] {
        &self.active[sample * self.k..(sample + 1) * self.k]
    }

    /// Dense sparse-hidden matrix `H` (`n x h`).
    pub fn hidden(&self) -> Matrix {
        let mut h = Matrix::zeros(self.pre.rows(), self.pre.cols());
        for (slot, (&j, &v)) in self.active.iter().zip(&self.values).enumerate() {
            h.set(slot / self.k, j, v);
        }
        h
    }

    /// Smallest gap between a surviving and a discarded pre-activation,
    /// over all samples. Finite differences are only meaningful when this
    /// is comfortably larger than the probe step.
    pub fn threshold_margin(&self) -> f64 {
        let h = self.pre.cols();
        if self.k == h {
            return f64::INFINITY;
        }
        (0..self.len())
            .map(|i| {
                let row = self.pre.row(i);
                let act = self.active_of(i);
                let kept = act.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
                let mut is_active = vec![false; h];
                act.iter().for_each(|&j| is_active[j] = true);
                let dropped = row
                    .iter()
                    .zip(&is_active)
                    .filter(|(_, &a)| !a)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                kept - dropped
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Forward pass over a batch `x` (`n x d`).
pub fn forward(p: &SaeParams, x: &Matrix) -> Result<ForwardTrace> {
    if x.cols() != p.dim() {
        return Err(Error::Dimension(format!(
            "input has {} columns, autoencoder expects {}",
            x.cols(),
            p.dim()
        )));
    }
    if let Some((i, j)) = x.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite input at ({i}, {j})")));
    }
    let (n, h, d, k) = (x.rows(), p.hidden(), p.dim(), p.k);

    let mut pre = matmul_nt(x, &p.w);
    let mut active = vec![0usize; n * k];
    let mut values = vec![0.0; n * k];
    let mut recon = Matrix::zeros(n, d);
    if n == 0 {
        return Ok(ForwardTrace {
            pre,
            active,
            values,
            recon,
            k,
        });
    }

    pre.as_mut_slice()
        .par_chunks_mut(ROW_CHUNK * h)
        .zip(active.par_chunks_mut(ROW_CHUNK * k))
        .zip(values.par_chunks_mut(ROW_CHUNK * k))
        .zip(recon.as_mut_slice().par_chunks_mut(ROW_CHUNK * d))
        .for_each(|(((pre_blk, act_blk), val_blk), rec_blk)| {
            let mut idx: Vec<usize> = Vec::with_capacity(h);
            let mut scratch: Vec<f64> = Vec::with_capacity(h);
            for (r, row) in pre_blk.chunks_exact_mut(h).enumerate() {
                for (v, bj) in row.iter_mut().zip(&p.b) {
                    *v += bj;
                }
                top_ascending(row, k, &mut scratch, &mut idx);
                let top = &idx[..k];
                let act = &mut act_blk[r * k..(r + 1) * k];
                let val = &mut val_blk[r * k..(r + 1) * k];
                let out = &mut rec_blk[r * d..(r + 1) * d];
                for (s, &j) in top.iter().enumerate() {
                    act[s] = j;
                    val[s] = row[j];
                    axpy(row[j], p.w.row(j), out);
                }
            }
        });

    Ok(ForwardTrace {
        pre,
        active,
        values,
        recon,
        k,
    })
}

/// Batch mean of per-sample squared Euclidean error.
pub fn reconstruction_loss(x: &Matrix, recon: &Matrix) -> Result<f64> {
    if x.shape() != recon.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction is {}x{}, input is {}x{}",
            recon.rows(),
            recon.cols(),
            x.rows(),
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let per_sample: Vec<f64> = (0..x.rows())
        .into_par_iter()
        .with_min_len(ROW_CHUNK)
        .map(|i| {
            x.row(i)
                .iter()
                .zip(recon.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    Ok(per_sample.iter().sum::<f64>() / x.rows() as f64)
}

/// Gradients of the reconstruction loss with respect to `W` and `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w: Matrix,
    pub b: Vec<f64>,
}

const UNIT_CHUNK: usize = 64;
const SAMPLE_BLOCK: usize = 64;

/// Exact gradient of [`reconstruction_loss`] with the active sets frozen.
///
/// With `g_i = 2 (x̂_i - x_i) / n` and `c_ij = w_j · g_i` for active unit
/// `j` of sample `i`:
///
/// ```text
/// dL/dw_j = Σ_{i : j active} h_ij g_i + c_ij x_i
/// dL/db_j = Σ_{i : j active} c_ij
/// ```
///
/// The first term is the decoder path, the second the encoder path. Each
/// row of the result sums over samples in increasing order.
pub fn backward(p: &SaeParams, trace: &ForwardTrace, x: &Matrix) -> Result<Gradients> {
    let (n, h, d, k) = (x.rows(), p.hidden(), p.dim(), p.k);
    if trace.recon.shape() != (n, d) || trace.k != k || trace.pre.cols() != h {
        return Err(Error::Dimension(
            "trace does not belong to these parameters and inputs".into(),
        ));
    }
    let mut gw = Matrix::zeros(h, d);
    let mut gb = vec![0.0; h];
    if n == 0 {
        return Ok(Gradients { w: gw, b: gb });
    }
    let scale = 2.0 / n as f64;

    // g_i and c_ij, per sample.
    let mut g = Matrix::zeros(n, d);
    let mut c = vec![0.0; n * k];
    g.as_mut_slice()
        .par_chunks_mut(ROW_CHUNK * d)
        .zip(c.par_chunks_mut(ROW_CHUNK * k))
        .enumerate()
        .for_each(|(blk, (g_blk, c_blk))| {
            for (r, grow) in g_blk.chunks_exact_mut(d).enumerate() {
                let i = blk * ROW_CHUNK + r;
                for ((gv, xh), xv) in grow.iter_mut().zip(trace.recon.row(i)).zip(x.row(i)) {
                    *gv = scale * (xh - xv);
                }
                for (s, &j) in trace.active_of(i).iter().enumerate() {
                    c_blk[r * k + s] = dot(p.w.row(j), grow);
                }
            }
        });

    // Slots of each unit in sample order (counting sort over `active`).
    let mut start = vec![0usize; h + 1];
    for &j in &trace.active {
        start[j + 1] += 1;
    }
    for j in 0..h {
        start[j + 1] += start[j];
    }
    let mut fill = start.clone();
    let mut slots = vec![0usize; n * k];
    for (slot, &j) in trace.active.iter().enumerate() {
        slots[fill[j]] = slot;
        fill[j] += 1;
    }

    // Units are split into chunks for the pool; within a chunk, samples are
    // visited block by block so the rows of `g` and `x` stay in cache. Every
    // row still accumulates its contributions in sample order.
    gw.as_mut_slice()
        .par_chunks_mut(UNIT_CHUNK * d)
        .zip(gb.par_chunks_mut(UNIT_CHUNK))
        .enumerate()
        .for_each(|(blk, (w_blk, b_blk))| {
            let first = blk * UNIT_CHUNK;
            let units = b_blk.len();
            let mut cursor: Vec<usize> = (0..units).map(|r| start[first + r]).collect();
            for block_end in (SAMPLE_BLOCK..n + SAMPLE_BLOCK).step_by(SAMPLE_BLOCK) {
                for (r, wrow) in w_blk.chunks_exact_mut(d).enumerate() {
                    let end = start[first + r + 1];
                    let mut at = cursor[r];
                    while at < end && slots[at] / k < block_end {
                        let slot = slots[at];
                        let i = slot / k;
                        let (v, cs) = (trace.values[slot], c[slot]);
                        for ((w, gv), xv) in wrow.iter_mut().zip(g.row(i)).zip(x.row(i)) {
                            *w = (*w + v * gv) + cs * xv;
                        }
                        b_blk[r] += cs;
                        at += 1;
                    }
                    cursor[r] = at;
                }
            }
        });

    Ok(Gradients { w: gw, b: gb })
}
