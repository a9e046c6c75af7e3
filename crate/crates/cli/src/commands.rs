use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use mfr_core::evalrep::{activation_frequencies, build_report, emit_report, EvalReport, ReportInputs};
use mfr_core::matching::{cosine_table, hungarian};
use mfr_core::numerics::Matrix;
use mfr_core::sae::SaeParams;
use mfr_core::storefmt::{
    read_activations, read_checkpoint, read_features, read_metrics, write_features,
    ActivationReader, ActivationWriter, Checkpoint,
};
use mfr_core::synthgen::{sample_batch, sample_eval_batch, sample_feature_matrix, FeatureMatrix};
use mfr_core::trainer::{DataSource, Trainer};
use mfr_core::{Error, Result};

use crate::args::train_config;

const SAMPLE_CHUNK: u64 = 4096;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn out_dir(m: &ArgMatches) -> Result<PathBuf> {
    let dir = m.get_one::<PathBuf>("out").expect("required").clone();
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    Ok(dir)
}

fn checkpoints(m: &ArgMatches) -> Result<Vec<Checkpoint>> {
    m.get_many::<PathBuf>("ckpt")
        .into_iter()
        .flatten()
        .map(read_checkpoint)
        .collect()
}

pub fn gen(m: &ArgMatches) -> Result<()> {
    let cfg = train_config(m)?;
    let DataSource::Synthetic(g) = &cfg.source else {
        return Err(Error::Config("gen needs a synthetic source".into()));
    };
    let fm = sample_feature_matrix(g)?;
    let out = out_dir(m)?;
    write_features(out.join("features.mfrf"), &fm)?;
    if let Some(&n) = m.get_one::<u64>("samples") {
        let path = out.join("samples.mfra");
        let mut w = ActivationWriter::create(&path, g.dim)?;
        let mut index = 0;
        let mut left = n;
        while left > 0 {
            let rows = left.min(SAMPLE_CHUNK);
            w.append(&sample_batch(&fm, rows as usize, index)?.x)?;
            left -= rows;
            index += 1;
        }
        w.finish()?;
    }
    println!(
        "d={} G={} E={} K={} lambda={} groups_per_sample={} seed={}",
        g.dim, g.features, g.groups, g.active_per_group, g.decay, g.groups_per_sample, g.seed
    );
    Ok(())
}

pub fn train(m: &ArgMatches) -> Result<()> {
    let cfg = train_config(m)?;
    let out = out_dir(m)?;
    let resume: Vec<Checkpoint> = m
        .get_many::<PathBuf>("resume")
        .into_iter()
        .flatten()
        .map(read_checkpoint)
        .collect::<Result<_>>()?;
    let metrics = out.join("metrics.csv");
    if resume.is_empty() && metrics.exists() {
        fs::remove_file(&metrics).map_err(io(&metrics))?;
    }
    let resolved = out.join("config.json");
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(&resolved, json + "\n").map_err(io(&resolved))?;

    let trainer = if resume.is_empty() {
        Trainer::new(cfg)?
    } else {
        Trainer::resume(cfg, resume)?
    };
    let outcome = trainer
        .with_metrics(&metrics)?
        .with_checkpoints(&out)?
        .run()?;
    if let Some(fm) = &outcome.features {
        write_features(out.join("features.mfrf"), fm)?;
    }
    let mut summary = String::from("final reconstruction loss:");
    for i in 0..outcome.state.len() {
        if let Some(r) = outcome.log.iter().rev().find(|r| r.sae_id == i) {
            let _ = write!(summary, " sae{i}={:.6}", r.recon_loss);
        }
    }
    println!("{summary}");
    Ok(())
}

fn dictionaries(cks: &[Checkpoint]) -> Vec<&Matrix> {
    cks.iter().map(|c| c.params.dictionary()).collect()
}

fn frequencies(params: &[&SaeParams], x: &Matrix) -> Result<Vec<Vec<f64>>> {
    params.iter().map(|p| activation_frequencies(p, x)).collect()
}

fn print_report(r: &EvalReport) {
    for (i, m) in r.gt_mmcs.iter().enumerate() {
        println!("sae{i}: ground-truth MMCS {m:.6}");
    }
    if r.pairwise_mmcs.len() > 1 {
        println!("MMCS(sae0, sae1) = {:.6}", r.pairwise_mmcs[0][1]);
    }
    match r.pearson_r {
        Some(v) => println!("pearson r = {v:.6}"),
        None if !r.gt_mmcs.is_empty() => println!("pearson r undefined"),
        None => {}
    }
    if !r.cluster_count.is_empty() {
        println!("cluster counts: {:?}", r.cluster_count);
    }
}

fn thresholds(m: &ArgMatches) -> (f64, f64) {
    (
        *m.get_one::<f64>("cluster-hi").expect("default"),
        *m.get_one::<f64>("cluster-lo").expect("default"),
    )
}

pub fn eval(m: &ArgMatches) -> Result<()> {
    let Some(features) = m.get_one::<PathBuf>("features") else {
        return Err(Error::Config(
            "ground-truth metrics need the feature file; pass --features FILE".into(),
        ));
    };
    let fm = read_features(features)?;
    let cks = checkpoints(m)?;
    let n = *m.get_one::<usize>("samples").expect("default");
    let seed = *m.get_one::<u64>("seed").expect("default");
    let x = sample_eval_batch(&fm, n, seed)?.x;
    let params: Vec<&SaeParams> = cks.iter().map(|c| &c.params).collect();
    let (hi, lo) = thresholds(m);
    let report = build_report(&ReportInputs {
        dictionaries: dictionaries(&cks),
        frequencies: frequencies(&params, &x)?,
        ground_truth: Some(&fm),
        cluster_hi: hi,
        cluster_lo: lo,
    })?;
    emit_report(&report, out_dir(m)?)?;
    print_report(&report);
    Ok(())
}

pub fn match_features(m: &ArgMatches) -> Result<()> {
    let cks = checkpoints(m)?;
    if cks.len() != 2 {
        return Err(Error::Config(format!(
            "match takes exactly two --ckpt files, got {}",
            cks.len()
        )));
    }
    let table = cosine_table(cks[0].params.dictionary(), cks[1].params.dictionary())?;
    let assignment = hungarian(&table)?;
    let mut csv = String::from("feature_a,feature_b,cosine\n");
    for &(a, b, sim) in &assignment.pairs {
        let _ = writeln!(csv, "{a},{b},{sim}");
    }
    match m.get_one::<PathBuf>("out") {
        Some(_) => {
            let path = out_dir(m)?.join("match.csv");
            fs::write(&path, csv).map_err(io(&path))?;
            println!(
                "matched {} pairs, mean cosine {:.6}",
                assignment.len(),
                assignment.total() / assignment.len().max(1) as f64
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn held_out_rows(path: &Path, n: usize) -> Result<Matrix> {
    let mut reader = ActivationReader::open(path)?;
    let n = n.min(reader.len() as usize);
    reader.read_rows(reader.len() - n as u64, n)
}

pub fn report(m: &ArgMatches) -> Result<()> {
    let cks = checkpoints(m)?;
    let fm: Option<FeatureMatrix> = m.get_one::<PathBuf>("features").map(read_features).transpose()?;
    let n = *m.get_one::<usize>("samples").expect("default");
    let x = match (m.get_one::<PathBuf>("activations"), &fm) {
        (Some(path), _) => Some(if n == 0 { read_activations(path)? } else { held_out_rows(path, n)? }),
        (None, Some(fm)) => Some(sample_eval_batch(fm, n, 0)?.x),
        (None, None) => None,
    };
    let params: Vec<&SaeParams> = cks.iter().map(|c| &c.params).collect();
    let freqs = match &x {
        Some(x) => frequencies(&params, x)?,
        None => params.iter().map(|p| vec![f64::NAN; p.hidden()]).collect(),
    };
    let (hi, lo) = thresholds(m);
    let report = build_report(&ReportInputs {
        dictionaries: dictionaries(&cks),
        frequencies: freqs,
        ground_truth: fm.as_ref(),
        cluster_hi: hi,
        cluster_lo: lo,
    })?;
    emit_report(&report, out_dir(m)?)?;
    print_report(&report);
    for (i, row) in report.l2_aligned.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|d| d.map_or("-".into(), |d| format!("{d:.4}")))
            .collect();
        println!("aligned L2 sae{i}: {}", cells.join(" "));
    }
    if let Some(path) = m.get_one::<PathBuf>("metrics") {
        let rows = read_metrics(path)?;
        let saes = rows.iter().map(|r| r.sae_id + 1).max().unwrap_or(0);
        for i in 0..saes {
            let mine: Vec<_> = rows.iter().filter(|r| r.sae_id == i).collect();
            let events = mine.iter().filter(|r| r.reinit_event).count();
            if let Some(last) = mine.last() {
                println!(
                    "sae{i}: step {} reconstruction loss {:.6}, {events} reinitializations",
                    last.step, last.recon_loss
                );
            }
        }
    }
    Ok(())
}
