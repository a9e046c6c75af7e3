//! `MFRC` checkpoints, one file per autoencoder.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MFRC"
//!      4     4  version (1)
//!      8     4  h
//!     12     4  d
//!     16     4  k
//!     20     8  step
//!     28     4  flags
//!     32         W (h·d f32), b (h f32)
//! ```
//!
//! Flag bit 0 appends the optimizer moments in `f32`: first and second
//! moment of `W`, then of `b`.
//!
//! Flag bit 1 appends the exact training state used for bit-identical
//! resumption, all in native precision:
//!
//! ```text
//! u32 block version (1)
//! f64 W, b, first/second moment of W, first/second moment of b
//! u64 optimizer step, u64 local step, u32 attempts, u32 settled
//! u64 probe samples, h × u64 probe counts
//! u64 window samples, h × u64 window counts
//! f64 alpha (NaN when unset)
//! u32 has snapshot; if 1: f64 metric, then a parameter/moment block as above
//! ```

use std::path::Path;

use super::bytes::{check_f32_representable, dim_field, u32_field, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::mfr::ActivationCounter;
use crate::numerics::{AdamWConfig, AdamWState, Matrix};
use crate::sae::SaeParams;
use crate::trainer::{SaeSlot, Snapshot};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFRC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_HEADER_LEN: u64 = 32;
pub const FLAG_MOMENTS: u32 = 1;
pub const FLAG_EXACT: u32 = 2;
const EXACT_BLOCK_VERSION: u32 = 1;

/// Adam moments of one autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub w_first: Vec<f64>,
    pub w_second: Vec<f64>,
    pub b_first: Vec<f64>,
    pub b_second: Vec<f64>,
}

impl Moments {
    fn of(opt_w: &AdamWState, opt_b: &AdamWState) -> Self {
        Moments {
            w_first: opt_w.first_moment.clone(),
            w_second: opt_w.second_moment.clone(),
            b_first: opt_b.first_moment.clone(),
            b_second: opt_b.second_moment.clone(),
        }
    }

    /// Optimizer states carrying these moments, at optimizer step `step`.
    pub fn into_states(self, step: u64, config: AdamWConfig) -> (AdamWState, AdamWState) {
        (
            AdamWState {
                config,
                first_moment: self.w_first,
                second_moment: self.w_second,
                step,
            },
            AdamWState {
                config,
                first_moment: self.b_first,
                second_moment: self.b_second,
                step,
            },
        )
    }
}

/// Complete trainer state of one autoencoder plus the shared penalty weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactState {
    pub slot: SaeSlot,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    /// Completed training steps of the run.
    pub step: u64,
    pub moments: Option<Moments>,
    pub exact: Option<ExactState>,
}

impl Checkpoint {
    pub fn bare(params: SaeParams, step: u64) -> Self {
        Checkpoint {
            params,
            step,
            moments: None,
            exact: None,
        }
    }

    pub fn from_slot(slot: &SaeSlot, step: u64, alpha: Option<f64>) -> Self {
        Checkpoint {
            params: slot.params.clone(),
            step,
            moments: Some(Moments::of(&slot.opt_w, &slot.opt_b)),
            exact: Some(ExactState {
                slot: slot.clone(),
                alpha,
            }),
        }
    }

    pub fn flags(&self) -> u32 {
        let mut f = 0;
        if self.moments.is_some() {
            f |= FLAG_MOMENTS;
        }
        if self.exact.is_some() {
            f |= FLAG_EXACT;
        }
        f
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    let (h, d) = (p.hidden(), p.dim());
    check_f32_representable(p.w.as_slice(), "W")?;
    check_f32_representable(&p.b, "b")?;
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(u32_field(h, "h")?);
    w.u32(u32_field(d, "d")?);
    w.u32(u32_field(p.k, "k")?);
    w.u64(ck.step);
    w.u32(ck.flags());
    w.f32s(p.w.as_slice());
    w.f32s(&p.b);
    if let Some(m) = &ck.moments {
        check_moment_shapes(m, h, d)?;
        for part in [&m.w_first, &m.w_second, &m.b_first, &m.b_second] {
            check_f32_representable(part, "optimizer moments")?;
            w.f32s(part);
        }
    }
    if let Some(ex) = &ck.exact {
        let s = &ex.slot;
        if s.params.hidden() != h || s.params.dim() != d {
            return Err(Error::Checkpoint("exact state shape differs from header".into()));
        }
        w.u32(EXACT_BLOCK_VERSION);
        put_exact_params(&mut w, &s.params, &s.opt_w, &s.opt_b);
        w.u64(s.local_step);
        w.u32(s.attempts);
        w.u32(s.settled as u32);
        for c in [&s.probe, &s.window] {
            w.u64(c.samples);
            w.u64s(&c.counts);
        }
        w.f64(ex.alpha.unwrap_or(f64::NAN));
        match &s.best {
            Some(snap) => {
                w.u32(1);
                w.f64(snap.metric);
                put_exact_params(&mut w, &snap.params, &snap.opt_w, &snap.opt_b);
            }
            None => w.u32(0),
        }
    }
    Ok(w.buf)
}

fn check_moment_shapes(m: &Moments, h: usize, d: usize) -> Result<()> {
    let ok = m.w_first.len() == h * d
        && m.w_second.len() == h * d
        && m.b_first.len() == h
        && m.b_second.len() == h;
    if ok {
        Ok(())
    } else {
        Err(Error::Checkpoint("optimizer moments do not match h x d".into()))
    }
}

fn put_exact_params(w: &mut ByteWriter, p: &SaeParams, opt_w: &AdamWState, opt_b: &AdamWState) {
    w.f64s(p.w.as_slice());
    w.f64s(&p.b);
    w.f64s(&opt_w.first_moment);
    w.f64s(&opt_w.second_moment);
    w.f64s(&opt_b.first_moment);
    w.f64s(&opt_b.second_moment);
    w.u64(opt_w.step);
}

fn get_exact_params(
    r: &mut ByteReader,
    h: usize,
    d: usize,
    k: usize,
) -> Result<(SaeParams, AdamWState, AdamWState)> {
    let at = r.offset();
    let wv = r.f64s(h * d, "exact W")?;
    let b = r.f64s(h, "exact b")?;
    let moments = Moments {
        w_first: r.f64s(h * d, "exact moments")?,
        w_second: r.f64s(h * d, "exact moments")?,
        b_first: r.f64s(h, "exact moments")?,
        b_second: r.f64s(h, "exact moments")?,
    };
    let step = r.u64("optimizer step")?;
    let params = SaeParams::new(Matrix::from_vec(h, d, wv)?, b, k)
        .map_err(|e| Error::format(at, e.to_string()))?;
    let (opt_w, opt_b) = moments.into_states(step, AdamWConfig::default());
    Ok((params, opt_w, opt_b))
}

fn get_counter(r: &mut ByteReader, h: usize) -> Result<ActivationCounter> {
    let at = r.offset();
    let samples = r.u64("counter samples")?;
    let counts = r.u64s(h, "counter counts")?;
    if counts.iter().any(|&c| c > samples) {
        return Err(Error::format(at, "activation count exceeds samples"));
    }
    Ok(ActivationCounter { counts, samples })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
    r.version("checkpoint", CHECKPOINT_VERSION)?;
    let h = dim_field(r.u32("h")?, 8, "h", false)?;
    let d = dim_field(r.u32("d")?, 12, "d", false)?;
    let k = dim_field(r.u32("k")?, 16, "k", false)?;
    let step = r.u64("step")?;
    let flags = r.u32("flags")?;
    if k > h {
        return Err(Error::format(16, format!("k = {k} exceeds h = {h}")));
    }
    if flags & !(FLAG_MOMENTS | FLAG_EXACT) != 0 {
        return Err(Error::format(28, format!("unknown flag bits {flags:#x}")));
    }
    let hd = h
        .checked_mul(d)
        .ok_or_else(|| Error::format(8, "declared size overflows"))?;
    let w = r.f32s(hd, "W")?;
    let b = r.f32s(h, "b")?;
    let params = SaeParams::new(Matrix::from_vec(h, d, w)?, b, k)?;
    let moments = if flags & FLAG_MOMENTS != 0 {
        Some(Moments {
            w_first: r.f32s(hd, "optimizer moments")?,
            w_second: r.f32s(hd, "optimizer moments")?,
            b_first: r.f32s(h, "optimizer moments")?,
            b_second: r.f32s(h, "optimizer moments")?,
        })
    } else {
        None
    };
    let exact = if flags & FLAG_EXACT != 0 {
        let at = r.offset();
        let version = r.u32("exact block version")?;
        if version != EXACT_BLOCK_VERSION {
            return Err(Error::format(at, format!("unknown exact block version {version}")));
        }
        let (params, opt_w, opt_b) = get_exact_params(&mut r, h, d, k)?;
        let local_step = r.u64("local step")?;
        let attempts = r.u32("attempts")?;
        let at = r.offset();
        let settled = match r.u32("settled")? {
            0 => false,
            1 => true,
            v => return Err(Error::format(at, format!("settled flag {v}"))),
        };
        let probe = get_counter(&mut r, h)?;
        let window = get_counter(&mut r, h)?;
        let alpha = r.f64("alpha")?;
        let at = r.offset();
        let best = match r.u32("snapshot flag")? {
            0 => None,
            1 => {
                let metric = r.f64("snapshot metric")?;
                let (params, opt_w, opt_b) = get_exact_params(&mut r, h, d, k)?;
                Some(Box::new(Snapshot {
                    metric,
                    params,
                    opt_w,
                    opt_b,
                }))
            }
            v => return Err(Error::format(at, format!("snapshot flag {v}"))),
        };
        Some(ExactState {
            slot: SaeSlot {
                params,
                opt_w,
                opt_b,
                probe,
                window,
                local_step,
                attempts,
                settled,
                best,
            },
            alpha: (!alpha.is_nan()).then_some(alpha),
        })
    } else {
        None
    };
    r.finish()?;
    Ok(Checkpoint {
        params,
        step,
        moments,
        exact,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
