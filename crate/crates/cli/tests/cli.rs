use std::path::Path;
use std::process::{Command, Output};

use mfr_core::storefmt::{read_features, CONFIG_KEYS};
use mfr_core::trainer::Preset;

fn mfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MFR_WORKERS")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const TINY: &[&str] = &[
    "--dim", "8", "--features", "16", "--groups", "2", "--active-per-group", "2",
    "--groups-per-sample", "2", "--hidden", "12", "--k", "4", "--batch-size", "32",
    "--total-examples", "640", "--probe-steps", "5", "--warmup-steps", "5",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    mfr(&args)
}

#[test]
fn help_documents_every_key_and_preset() {
    for sub in ["train", "gen"] {
        let help = text(&mfr(&[sub, "--help"]));
        for key in CONFIG_KEYS {
            let flag = format!("--{}", key.name.replace('_', "-"));
            assert!(help.contains(&flag), "{sub} help lacks {flag}");
            assert!(help.contains(key.help), "{sub} help lacks text for {}", key.name);
        }
        for p in Preset::ALL {
            assert!(help.contains(p.name()), "{sub} help lacks preset {}", p.name());
        }
    }
}

#[test]
fn gen_preset_writes_preset_parameters_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mfr(&["gen", "--preset", "paper-synthetic", "--seed", "5", "--samples", "100", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o));
        assert!(text(&o).contains("d=256 G=512 E=12 K=3 lambda=0.99"), "{}", text(&o));
    }
    for name in ["features.mfrf", "samples.mfra"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let fm = read_features(a.join("features.mfrf")).unwrap();
    assert_eq!(fm.matrix().shape(), (256, 512));
    assert_eq!(fm.config().seed, 5);
}

#[test]
fn invalid_values_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = mfr(&["gen", "--lambda", "1.5", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("lambda must lie in (0,1)"), "{}", text(&o));

    let o = mfr(&["train", "--mode", "mfr", "--n-saes", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("at least 2 SAEs"), "{}", text(&o));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"hidden\": 10, \"bogus\": 1").unwrap();
    let o = mfr(&["train", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn missing_files_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfr(&["match", "--ckpt", "/nonexistent/a.mfrc", "--ckpt", "/nonexistent/b.mfrc"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let o = train_tiny(dir.path(), &["--activations", "/nonexistent/x.mfra", "--source", "activations"]);
    assert_eq!(o.status.code(), Some(2), "synthetic keys with a file source: {}", text(&o));
}

#[test]
fn train_then_eval_match_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_tiny(&run, &["--mode", "mfr", "--seed", "9", "--checkpoint-every", "10"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("final reconstruction loss: sae0="), "{}", text(&o));
    for name in ["metrics.csv", "config.json", "features.mfrf", "sae0.mfrc", "sae1.mfrc", "sae0-step00000010.mfrc"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,sae_id,recon_loss,penalty_raw,alpha_eff,mmcs_mean,inactivity,reinit_event\n"));

    let (a, b) = (run.join("sae0.mfrc"), run.join("sae1.mfrc"));
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    let features = run.join("features.mfrf");
    let eval_dir = dir.path().join("eval");
    let o = mfr(&["eval", "--ckpt", a, "--ckpt", b, "--features", features.to_str().unwrap(), "--samples", "500", "--out", eval_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["gt_mmcs"].as_array().unwrap().len(), 2);
    assert_eq!(report["cluster_count"].as_array().unwrap().len(), 2);
    let scatter = std::fs::read_to_string(eval_dir.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 24);

    let o = mfr(&["eval", "--ckpt", a, "--ckpt", b, "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("--features"), "{}", text(&o));

    let o = mfr(&["match", "--ckpt", a, "--ckpt", a]);
    assert!(o.status.success(), "{}", text(&o));
    let rows: Vec<_> = String::from_utf8(o.stdout).unwrap().lines().skip(1).map(str::to_owned).collect();
    assert_eq!(rows.len(), 12);
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[0], f[1]), (i.to_string().as_str(), i.to_string().as_str()));
        assert!((f[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-12, "{row}");
    }

    let report_dir = dir.path().join("report");
    let metrics_path = run.join("metrics.csv");
    let o = mfr(&["report", "--ckpt", a, "--ckpt", b, "--metrics", metrics_path.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("aligned L2 sae0"), "{}", text(&o));
    assert!(report_dir.join("report.json").exists());
}

#[test]
fn resume_continues_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    assert!(train_tiny(&full, &["--mode", "mfr", "--checkpoint-every", "10"]).status.success());
    let ck = |i: usize| full.join(format!("sae{i}-step00000010.mfrc"));
    let (c0, c1) = (ck(0), ck(1));
    let o = train_tiny(&part, &["--mode", "mfr", "--resume", c0.to_str().unwrap(), "--resume", c1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for name in ["sae0.mfrc", "sae1.mfrc"] {
        assert_eq!(std::fs::read(full.join(name)).unwrap(), std::fs::read(part.join(name)).unwrap());
    }
}

#[test]
fn worker_count_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (one, three) = (dir.path().join("one"), dir.path().join("three"));
    let mut args = vec!["--workers", "1", "train", "--mode", "mfr", "--out", one.to_str().unwrap()];
    args.extend_from_slice(TINY);
    assert!(mfr(&args).status.success());
    args[1] = "3";
    args[6] = three.to_str().unwrap();
    assert!(mfr(&args).status.success());
    for name in ["metrics.csv", "sae0.mfrc", "sae1.mfrc"] {
        assert_eq!(std::fs::read(one.join(name)).unwrap(), std::fs::read(three.join(name)).unwrap(), "{name}");
    }
}
