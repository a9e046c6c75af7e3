//! Per-step training metrics as CSV, one row per autoencoder and logged step.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "sae_id",
    "recon_loss",
    "penalty_raw",
    "alpha_eff",
    "mmcs_mean",
    "inactivity",
    "reinit_event",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub sae_id: usize,
    pub recon_loss: f64,
    /// Unweighted penalty `(1/C(N,2)) Σ (1 - MMCS)`; NaN for a single SAE.
    pub penalty_raw: f64,
    pub alpha_eff: f64,
    /// Mean MMCS of this SAE against the others; NaN for a single SAE.
    pub mmcs_mean: f64,
    /// Inactivity metric over the samples since the previous record.
    pub inactivity: f64,
    pub reinit_event: bool,
}

impl MetricsRecord {
    fn fields(&self) -> [String; 8] {
        [
            self.step.to_string(),
            self.sae_id.to_string(),
            sig9(self.recon_loss),
            sig9(self.penalty_raw),
            sig9(self.alpha_eff),
            sig9(self.mmcs_mean),
            sig9(self.inactivity),
            (self.reinit_event as u8).to_string(),
        ]
    }
}

/// Nine significant digits, fixed notation for moderate magnitudes and
/// scientific otherwise, trailing zeros removed. Round-trips through `f32`.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let fixed = format!("{x:.*}", (8 - exp) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Appends records to a metrics file, writing the header only if the file
/// is new or empty. Every record is flushed before `write` returns.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
        let mut w = MetricsWriter {
            inner: csv::Writer::from_writer(file),
            path,
        };
        if empty {
            w.put(METRICS_HEADER)?;
        }
        Ok(w)
    }

    fn put<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        let io = |path: &Path, e: std::io::Error| Error::io(path, e);
        self.inner
            .write_record(fields)
            .map_err(|e| io(&self.path, e.into()))?;
        self.inner.flush().map_err(|e| io(&self.path, e))
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.put(record.fields())
    }
}

pub fn append_metrics(path: impl AsRef<Path>, record: &MetricsRecord) -> Result<()> {
    MetricsWriter::open(path)?.write(record)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let header = rdr.headers().map_err(|e| Error::io(path, e.into()))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::format(0, format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::io(path, e.into()))?;
        let at = row.position().map_or(0, |p| p.byte());
        let bad = |field: &str| Error::format(at, format!("bad {field} in metrics row"));
        let num = |i: usize| row[i].parse::<f64>().map_err(|_| bad(METRICS_HEADER[i]));
        out.push(MetricsRecord {
            step: row[0].parse().map_err(|_| bad("step"))?,
            sae_id: row[1].parse().map_err(|_| bad("sae_id"))?,
            recon_loss: num(2)?,
            penalty_raw: num(3)?,
            alpha_eff: num(4)?,
            mmcs_mean: num(5)?,
            inactivity: num(6)?,
            reinit_event: match &row[7] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("reinit_event")),
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, reinit: bool) -> MetricsRecord {
        MetricsRecord {
            step,
            sae_id: 1,
            recon_loss: 0.123456789123,
            penalty_raw: 0.5,
            alpha_eff: 3.0,
            mmcs_mean: f64::NAN,
            inactivity: 1.859375,
            reinit_event: reinit,
        }
    }

    #[test]
    fn header_written_once_and_rows_flushed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        append_metrics(&path, &record(0, false)).unwrap();
        append_metrics(&path, &record(1, true)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            lines[0],
            "step,sae_id,recon_loss,penalty_raw,alpha_eff,mmcs_mean,inactivity,reinit_event"
        );
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,1,0.123456789,0.5,3,NaN,1.859375,0");
        assert!(lines[2].ends_with(",1"));
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[1].reinit_event);
        assert_eq!(back[0].recon_loss, 0.123456789);
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(123456.789012), "123456.789");
        assert_eq!(sig9(2.0e-7), "2e-7");
        assert_eq!(sig9(-1.23456789012e12), "-1.23456789e12");
        assert_eq!(sig9(9.9999999999), "10");
        assert_eq!(sig9(0.0), "0");
        for &x in &[1.0e-300, 0.1, 7.0, 1234567890.123, std::f64::consts::PI] {
            let y: f64 = sig9(x).parse().unwrap();
            assert!(((x - y) / x).abs() < 5e-9, "{x} -> {y}");
        }
    }
}
