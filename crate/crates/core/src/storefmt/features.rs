//! `MFRF` ground-truth feature files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MFRF"
//!      4     4  version (1)
//!      8     4  d
//!     12     4  G
//!     16     8  λ (f64)
//!     24     4  E
//!     28     4  K
//!     32     8  seed
//!     40  4·d·G  F, row-major f32
//! ```
//!
//! The number of groups active per sample is not stored; readers assume
//! every group is active and callers can override it with
//! [`FeatureMatrix::with_groups_per_sample`].

use std::path::Path;

use super::bytes::{check_f32_representable, dim_field, u32_field, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::synthgen::{FeatureMatrix, GenConfig};

pub const FEATURE_MAGIC: &[u8; 4] = b"MFRF";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(fm: &FeatureMatrix) -> Result<Vec<u8>> {
    let cfg = fm.config();
    check_f32_representable(fm.matrix().as_slice(), "feature matrix")?;
    let mut w = ByteWriter::default();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u32(u32_field(cfg.dim, "d")?);
    w.u32(u32_field(cfg.features, "G")?);
    w.f64(cfg.decay);
    w.u32(u32_field(cfg.groups, "E")?);
    w.u32(u32_field(cfg.active_per_group, "K")?);
    w.u64(cfg.seed);
    w.f32s(fm.matrix().as_slice());
    Ok(w.buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEATURE_MAGIC, "feature")?;
    r.version("feature", FEATURE_VERSION)?;
    let dim = dim_field(r.u32("d")?, 8, "d", false)?;
    let features = dim_field(r.u32("G")?, 12, "G", false)?;
    let decay = r.f64("lambda")?;
    let groups = dim_field(r.u32("E")?, 24, "E", false)?;
    let active_per_group = dim_field(r.u32("K")?, 28, "K", false)?;
    let seed = r.u64("seed")?;
    let n = dim
        .checked_mul(features)
        .ok_or_else(|| Error::format(8, "declared size overflows"))?;
    let data = r.f32s(n, "feature matrix")?;
    r.finish()?;
    let config = GenConfig {
        dim,
        features,
        groups,
        active_per_group,
        decay,
        groups_per_sample: groups,
        seed,
    };
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::format(8, format!("invalid header: {}", problems.join("; "))));
    }
    FeatureMatrix::from_parts(config, Matrix::from_vec(dim, features, data)?)
}

pub fn write_features(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(fm)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    decode_features(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
