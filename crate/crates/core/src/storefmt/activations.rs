//! `MFRA` activation files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MFRA"
//!      4     4  version (1)
//!      8     4  dim d
//!     12     8  count n
//!     20     4  dtype (0 = f32)
//!     24  4·n·d  rows, row-major f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::bytes::{check_f32_representable, decode_f32s, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const ACTIVATION_MAGIC: &[u8; 4] = b"MFRA";
pub const ACTIVATION_VERSION: u32 = 1;
pub const ACTIVATION_HEADER_LEN: u64 = 24;
const DTYPE_F32: u32 = 0;
/// Rows decoded per read when streaming a whole file.
const CHUNK_ROWS: usize = 4096;

/// Random-access reader over an activation file. Only the header is held
/// in memory; rows are read on demand.
pub struct ActivationReader<R> {
    inner: R,
    dim: usize,
    count: u64,
}

impl ActivationReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file)).map_err(|e| with_path(e, path))
    }
}

impl<R: Read + Seek> ActivationReader<R> {
    /// Validates the header and that the payload length matches it exactly.
    pub fn from_reader(mut inner: R) -> Result<Self> {
        let io = |e| Error::io(PathBuf::from("<activations>"), e);
        let len = inner.seek(SeekFrom::End(0)).map_err(io)?;
        inner.seek(SeekFrom::Start(0)).map_err(io)?;
        let mut head = vec![0u8; len.min(ACTIVATION_HEADER_LEN) as usize];
        inner.read_exact(&mut head).map_err(io)?;
        let mut r = ByteReader::new(&head);
        r.magic(ACTIVATION_MAGIC, "activation")?;
        r.version("activation", ACTIVATION_VERSION)?;
        let dim = r.u32("dim")?;
        let count = r.u64("count")?;
        let dtype = r.u32("dtype")?;
        if dim == 0 {
            return Err(Error::format(8, "dim must be positive"));
        }
        if dtype != DTYPE_F32 {
            return Err(Error::format(20, format!("unsupported dtype tag {dtype}")));
        }
        let row_bytes = dim as u64 * 4;
        let payload = count
            .checked_mul(row_bytes)
            .and_then(|p| p.checked_add(ACTIVATION_HEADER_LEN))
            .ok_or_else(|| Error::format(12, "declared size overflows"))?;
        if len < payload {
            let rows = (len - ACTIVATION_HEADER_LEN) / row_bytes;
            return Err(Error::format(
                ACTIVATION_HEADER_LEN + rows * row_bytes,
                format!("truncated: header declares {count} rows, file holds {rows} complete rows"),
            ));
        }
        if len > payload {
            return Err(Error::format(
                payload,
                format!("{} unexpected trailing bytes", len - payload),
            ));
        }
        Ok(ActivationReader {
            inner,
            dim: dim as usize,
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Rows `start..start + n`.
    pub fn read_rows(&mut self, start: u64, n: usize) -> Result<Matrix> {
        let end = start.checked_add(n as u64).filter(|&e| e <= self.count);
        if end.is_none() {
            return Err(Error::DataExhausted(format!(
                "rows {start}..{} requested from a file of {} rows",
                start.saturating_add(n as u64),
                self.count
            )));
        }
        let offset = ACTIVATION_HEADER_LEN + start * self.dim as u64 * 4;
        let io = |e| Error::io(PathBuf::from("<activations>"), e);
        self.inner.seek(SeekFrom::Start(offset)).map_err(io)?;
        let mut buf = vec![0u8; n * self.dim * 4];
        self.inner.read_exact(&mut buf).map_err(io)?;
        let data = decode_f32s(&buf, offset, "activations")?;
        Matrix::from_vec(n, self.dim, data)
    }

    /// The whole file, decoded in fixed-size chunks.
    pub fn read_all(&mut self) -> Result<Matrix> {
        let total = usize::try_from(self.count)
            .map_err(|_| Error::format(12, "row count exceeds addressable memory"))?;
        let mut data = Vec::with_capacity(total.saturating_mul(self.dim));
        let mut start = 0usize;
        while start < total {
            let n = CHUNK_ROWS.min(total - start);
            data.extend(self.read_rows(start as u64, n)?.into_vec());
            start += n;
        }
        Matrix::from_vec(total, self.dim, data)
    }
}

/// Streaming writer; the row count is patched into the header on
/// [`finish`](ActivationWriter::finish).
pub struct ActivationWriter {
    out: BufWriter<File>,
    path: PathBuf,
    dim: usize,
    count: u64,
}

impl ActivationWriter {
    pub fn create(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if dim == 0 {
            return Err(Error::Config("activation dim must be positive".into()));
        }
        let dim32 = super::bytes::u32_field(dim, "dim")?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = ActivationWriter {
            out: BufWriter::new(file),
            path,
            dim,
            count: 0,
        };
        let mut head = Vec::with_capacity(ACTIVATION_HEADER_LEN as usize);
        head.extend_from_slice(ACTIVATION_MAGIC);
        head.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
        head.extend_from_slice(&dim32.to_le_bytes());
        head.extend_from_slice(&0u64.to_le_bytes());
        head.extend_from_slice(&DTYPE_F32.to_le_bytes());
        w.write_bytes(&head)?;
        Ok(w)
    }

    fn write_bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, rows: &Matrix) -> Result<()> {
        if rows.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "rows of width {} written to a file of dim {}",
                rows.cols(),
                self.dim
            )));
        }
        check_f32_representable(rows.as_slice(), "activations")?;
        let mut buf = Vec::with_capacity(rows.as_slice().len() * 4);
        for &v in rows.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.write_bytes(&buf)?;
        self.count += rows.rows() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        let io = |p: &Path, e| Error::io(p, e);
        self.out.flush().map_err(|e| io(&self.path, e))?;
        let file = self.out.get_mut();
        file.seek(SeekFrom::Start(12)).map_err(|e| io(&self.path, e))?;
        file.write_all(&self.count.to_le_bytes())
            .map_err(|e| io(&self.path, e))?;
        file.sync_all().map_err(|e| io(&self.path, e))?;
        Ok(self.count)
    }
}

pub fn write_activations(path: impl AsRef<Path>, x: &Matrix) -> Result<()> {
    let mut w = ActivationWriter::create(path, x.cols())?;
    w.append(x)?;
    w.finish().map(|_| ())
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    ActivationReader::open(path)?
        .read_all()
        .map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}
