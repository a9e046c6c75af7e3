//! Post-hoc evaluation of trained dictionaries: recovery of ground-truth
//! features, cross-SAE similarity tables, decoder distances, and reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{cosine_table, hungarian, mmcs, row_max, SimilarityTable};
use crate::numerics::{matmul_nt, pearson, Matrix};
use crate::sae::{forward, SaeParams};
use crate::synthgen::FeatureMatrix;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const SCATTER_HEADER: [&str; 5] = [
    "sae_id",
    "feature_id",
    "cross_sae_sim",
    "ground_truth_sim",
    "activation_freq",
];
/// Default cluster thresholds: similar across SAEs, dissimilar to the input.
pub const CLUSTER_HI: f64 = 0.8;
pub const CLUSTER_LO: f64 = 0.4;

/// MMCS of a dictionary against the ground-truth features.
pub fn ground_truth_mmcs(w: &Matrix, fm: &FeatureMatrix) -> Result<f64> {
    mmcs(w, fm.dictionary())
}

/// Fraction of the rows of `x` on which each hidden unit is active.
pub fn activation_frequencies(p: &SaeParams, x: &Matrix) -> Result<Vec<f64>> {
    let trace = forward(p, x)?;
    let mut counts = vec![0u64; p.hidden()];
    for &j in &trace.active {
        counts[j] += 1;
    }
    let n = x.rows().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// One feature of one SAE in the similarity analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub sae_id: usize,
    pub feature_id: usize,
    /// Cosine with its Hungarian partner in the other SAE.
    pub cross_sae_sim: f64,
    /// Largest cosine with any ground-truth feature (NaN without ground truth).
    pub ground_truth_sim: f64,
    pub activation_freq: f64,
}

/// Scatter rows for the features of `w` that the Hungarian pairing with
/// `other` matches (all of them when `w` has no more features than `other`).
pub fn similarity_scatter(
    sae_id: usize,
    w: &Matrix,
    other: &Matrix,
    ground_truth: Option<&Matrix>,
    frequencies: &[f64],
) -> Result<Vec<ScatterRow>> {
    if frequencies.len() != w.rows() {
        return Err(Error::Dimension(format!(
            "{} frequencies for {} features",
            frequencies.len(),
            w.rows()
        )));
    }
    let pairs = hungarian(&cosine_table(w, other)?)?;
    let gt = match ground_truth {
        Some(f) => Some(row_max(&cosine_table(w, f)?)),
        None => None,
    };
    Ok(pairs
        .pairs
        .iter()
        .map(|&(i, _, sim)| ScatterRow {
            sae_id,
            feature_id: i,
            cross_sae_sim: sim,
            ground_truth_sim: gt.as_ref().map_or(f64::NAN, |g| g[i].1),
            activation_freq: frequencies[i],
        })
        .collect())
}

/// Rows with cross-SAE similarity at least `hi` and ground-truth
/// similarity at most `lo`.
pub fn cluster_count(rows: &[ScatterRow], hi: f64, lo: f64) -> usize {
    rows.iter()
        .filter(|r| r.cross_sae_sim >= hi && r.ground_truth_sim <= lo)
        .count()
}

/// Frobenius distance after reordering the features of `b` to best match
/// `a`. The permutation maximizes the summed inner products, which is the
/// one minimizing the distance, so the result is the distance between the
/// dictionaries as unordered feature sets.
pub fn decoder_l2_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_same_shape(a, b)?;
    let table = SimilarityTable {
        sims: matmul_nt(a, b),
    };
    let assignment = hungarian(&table)?;
    let total: f64 = assignment
        .pairs
        .iter()
        .map(|&(i, j, _)| {
            a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum();
    Ok(total.sqrt())
}

/// Frobenius distance with features compared in stored order.
pub fn decoder_l2_raw(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "dictionaries are {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Summary of an ensemble. Matrices are indexed by SAE; entries that are
/// undefined (different shapes, missing ground truth) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// MMCS of each dictionary against the ground truth.
    pub gt_mmcs: Vec<f64>,
    /// `pairwise_mmcs[i][j]` = MMCS(W_i, W_j).
    pub pairwise_mmcs: Vec<Vec<f64>>,
    /// Correlation of cross-SAE and ground-truth similarity over the
    /// scatter of SAEs 0 and 1.
    pub pearson_r: Option<f64>,
    /// Cluster size per SAE in the scatter of SAEs 0 and 1.
    pub cluster_count: Vec<usize>,
    pub l2_aligned: Vec<Vec<Option<f64>>>,
    pub l2_raw: Vec<Vec<Option<f64>>>,
    #[serde(skip)]
    pub scatter: Vec<ScatterRow>,
}

/// Inputs to [`build_report`].
pub struct ReportInputs<'a> {
    pub dictionaries: Vec<&'a Matrix>,
    /// Per-SAE activation frequencies (same order as `dictionaries`).
    pub frequencies: Vec<Vec<f64>>,
    pub ground_truth: Option<&'a FeatureMatrix>,
    pub cluster_hi: f64,
    pub cluster_lo: f64,
}

pub fn build_report(inputs: &ReportInputs) -> Result<EvalReport> {
    let dicts = &inputs.dictionaries;
    let n = dicts.len();
    if n == 0 {
        return Err(Error::Config("cannot report on an empty ensemble".into()));
    }
    if inputs.frequencies.len() != n {
        return Err(Error::Dimension(format!(
            "{} frequency vectors for {n} SAEs",
            inputs.frequencies.len()
        )));
    }
    let gt = inputs.ground_truth.map(FeatureMatrix::dictionary);
    let gt_mmcs = match inputs.ground_truth {
        Some(fm) => dicts
            .iter()
            .map(|w| ground_truth_mmcs(w, fm))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut pairwise_mmcs = vec![vec![1.0; n]; n];
    let mut l2_aligned = vec![vec![Some(0.0); n]; n];
    let mut l2_raw = vec![vec![Some(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            pairwise_mmcs[i][j] = mmcs(dicts[i], dicts[j])?;
            if j > i {
                let same = dicts[i].shape() == dicts[j].shape();
                let aligned = same.then(|| decoder_l2_distance(dicts[i], dicts[j])).transpose()?;
                let raw = same.then(|| decoder_l2_raw(dicts[i], dicts[j])).transpose()?;
                l2_aligned[i][j] = aligned;
                l2_aligned[j][i] = aligned;
                l2_raw[i][j] = raw;
                l2_raw[j][i] = raw;
            }
        }
    }
    let mut scatter = Vec::new();
    let mut pearson_r = None;
    let mut clusters = Vec::new();
    if n >= 2 {
        for (id, (a, b)) in [(0, (0, 1)), (1, (1, 0))] {
            let rows = similarity_scatter(id, dicts[a], dicts[b], gt, &inputs.frequencies[a])?;
            if gt.is_some() {
                clusters.push(cluster_count(&rows, inputs.cluster_hi, inputs.cluster_lo));
            }
            scatter.extend(rows);
        }
        if gt.is_some() {
            let xs: Vec<f64> = scatter.iter().map(|r| r.cross_sae_sim).collect();
            let ys: Vec<f64> = scatter.iter().map(|r| r.ground_truth_sim).collect();
            pearson_r = match pearson(&xs, &ys) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(why)) => {
                    log::warn!("scatter correlation undefined: {why}");
                    None
                }
                Err(e) => return Err(e),
            };
        }
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        gt_mmcs,
        pairwise_mmcs,
        pearson_r,
        cluster_count: clusters,
        l2_aligned,
        l2_raw,
        scatter,
    })
}

/// Writes `report.json` and `scatter.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    write_scatter(dir.join("scatter.csv"), &report.scatter)
}

/// Reads back what [`emit_report`] wrote.
pub fn read_report(dir: impl AsRef<Path>) -> Result<EvalReport> {
    let dir = dir.as_ref();
    let json_path = dir.join("report.json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let mut report: EvalReport = serde_json::from_str(&text)
        .map_err(|e| Error::format(e.column() as u64, format!("report.json: {e}")))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "report",
            found: report.schema_version,
            supported: REPORT_SCHEMA_VERSION,
        });
    }
    report.scatter = read_scatter(dir.join("scatter.csv"))?;
    Ok(report)
}

pub fn write_scatter(path: impl AsRef<Path>, rows: &[ScatterRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(SCATTER_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.sae_id.to_string(),
            r.feature_id.to_string(),
            r.cross_sae_sim.to_string(),
            r.ground_truth_sim.to_string(),
            r.activation_freq.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scatter(path: impl AsRef<Path>) -> Result<Vec<ScatterRow>> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut rdr = csv::Reader::from_path(path).map_err(io)?;
    if rdr.headers().map_err(io)?.iter().ne(SCATTER_HEADER) {
        return Err(Error::format(0, "unexpected scatter header"));
    }
    rdr.records()
        .map(|row| {
            let row = row.map_err(io)?;
            let at = row.position().map_or(0, |p| p.byte());
            let bad = || Error::format(at, "malformed scatter row");
            let f = |i: usize| row[i].parse::<f64>().map_err(|_| bad());
            Ok(ScatterRow {
                sae_id: row[0].parse().map_err(|_| bad())?,
                feature_id: row[1].parse().map_err(|_| bad())?,
                cross_sae_sim: f(2)?,
                ground_truth_sim: f(3)?,
                activation_freq: f(4)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::synthgen::{sample_feature_matrix, GenConfig};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 3);
        Matrix::from_vec(rows, cols, rng.gaussian_vec(rows * cols)).unwrap()
    }

    fn small_features() -> FeatureMatrix {
        sample_feature_matrix(&GenConfig {
            dim: 8,
            features: 12,
            groups: 3,
            active_per_group: 2,
            decay: 0.9,
            groups_per_sample: 3,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn ground_truth_dictionary_scores_one() {
        let fm = small_features();
        let m = ground_truth_mmcs(fm.dictionary(), &fm).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_mmcs_dimension_mismatch() {
        let fm = small_features();
        assert!(matches!(
            ground_truth_mmcs(&random(5, 7, 1), &fm),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn identical_dictionaries_give_unit_scatter_and_no_cluster() {
        let fm = small_features();
        let w = fm.dictionary();
        let rows = similarity_scatter(0, w, w, Some(w), &[0.5; 12]).unwrap();
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert!((r.cross_sae_sim - 1.0).abs() < 1e-12);
            assert!((r.ground_truth_sim - 1.0).abs() < 1e-12);
        }
        assert_eq!(cluster_count(&rows, CLUSTER_HI, CLUSTER_LO), 0);
    }

    #[test]
    fn scatter_rows_match_smaller_dictionary() {
        let a = random(5, 4, 1);
        let b = random(9, 4, 2);
        assert_eq!(similarity_scatter(0, &a, &b, None, &[0.0; 5]).unwrap().len(), 5);
        assert_eq!(similarity_scatter(1, &b, &a, None, &[0.0; 9]).unwrap().len(), 5);
    }

    #[test]
    fn cluster_thresholds_are_inclusive() {
        let row = |x, g| ScatterRow {
            sae_id: 0,
            feature_id: 0,
            cross_sae_sim: x,
            ground_truth_sim: g,
            activation_freq: 0.0,
        };
        let rows = [row(0.8, 0.4), row(0.95, 0.1), row(0.79, 0.1), row(0.9, 0.41)];
        assert_eq!(cluster_count(&rows, 0.8, 0.4), 2);
    }

    #[test]
    fn l2_zero_on_permuted_copy() {
        let a = random(6, 3, 5);
        let mut b = a.clone();
        let (r0, r1) = (a.row(1).to_vec(), a.row(4).to_vec());
        b.row_mut(1).copy_from_slice(&r1);
        b.row_mut(4).copy_from_slice(&r0);
        assert_eq!(decoder_l2_distance(&a, &a).unwrap(), 0.0);
        assert!(decoder_l2_distance(&a, &b).unwrap() < 1e-12);
        assert!(decoder_l2_raw(&a, &b).unwrap() > 0.1);
        assert!(matches!(
            decoder_l2_distance(&a, &random(5, 3, 1)),
            Err(Error::Dimension(_))
        ));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn l2_matches_brute_force_permutation() {
        for seed in 0..50 {
            let a = random(4, 3, 100 + seed);
            let b = random(4, 3, 200 + seed);
            let best = permutations(4)
                .into_iter()
                .map(|p| {
                    (0..4)
                        .map(|i| {
                            a.row(i)
                                .iter()
                                .zip(b.row(p[i]))
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let got = decoder_l2_distance(&a, &b).unwrap();
            assert!((got - best).abs() < 1e-12, "seed {seed}: {got} vs {best}");
        }
    }

    #[test]
    fn l2_is_a_pseudometric() {
        for seed in 0..100 {
            let [a, b, c] = [0, 1, 2].map(|k| random(5, 3, seed * 3 + k));
            let d = |x: &Matrix, y: &Matrix| decoder_l2_distance(x, y).unwrap();
            assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-9);
            assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        }
    }

    #[test]
    fn empty_ensemble_is_config_error() {
        let inputs = ReportInputs {
            dictionaries: vec![],
            frequencies: vec![],
            ground_truth: None,
            cluster_hi: CLUSTER_HI,
            cluster_lo: CLUSTER_LO,
        };
        assert!(matches!(build_report(&inputs), Err(Error::Config(_))));
    }

    #[test]
    fn report_round_trip() {
        let fm = small_features();
        let (a, b) = (random(10, 8, 1), random(10, 8, 2));
        let inputs = ReportInputs {
            dictionaries: vec![&a, &b],
            frequencies: vec![vec![0.25; 10], vec![0.125; 10]],
            ground_truth: Some(&fm),
            cluster_hi: CLUSTER_HI,
            cluster_lo: CLUSTER_LO,
        };
        let report = build_report(&inputs).unwrap();
        assert_eq!(report.scatter.len(), 20);
        assert_eq!(report.cluster_count.len(), 2);
        assert_eq!(report.l2_aligned[0][0], Some(0.0));
        assert_eq!(report.l2_aligned[0][1], report.l2_aligned[1][0]);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let header = std::fs::read_to_string(dir.path().join("scatter.csv")).unwrap();
        assert!(header.starts_with("sae_id,feature_id,cross_sae_sim,ground_truth_sim,activation_freq\n"));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        for key in ["gt_mmcs", "pairwise_mmcs", "pearson_r", "cluster_count", "l2_aligned", "l2_raw", "schema_version"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(read_report(dir.path()).unwrap(), report);
    }
}
