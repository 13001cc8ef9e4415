//! End-to-end tests of the `cdm` binary: exit codes, determinism, and the
//! artifacts each subcommand leaves behind.

use std::path::Path;
use std::process::{Command, Output};

fn cdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdm"))
        .args(args)
        .output()
        .expect("spawn cdm")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

const TINY_CONFIG: &str = "\
image_size=16
latent_dim=16
t_max=50
n_sampling=10
mrm_epochs=2
mrm_base_width=4
mrm_n_stages=2
mdn_epochs=3
mdn_blocks=2
cunet_epochs=2
cunet_base_width=4
cunet_n_scales=2
batch_size=4
";

#[test]
fn gen_data_writes_split_dataset_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("a");
    let d2 = tmp.path().join("b");
    for d in [&d1, &d2] {
        let out = cdm(&[
            "gen-data",
            "--out",
            d.to_str().unwrap(),
            "--cases",
            "10",
            "--size",
            "16",
            "--seed",
            "7",
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
        // stdout carries only the manifest path
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.trim().ends_with("manifest.txt"), "stdout: {stdout}");
    }
    let snap1 = dir_snapshot(&d1);
    assert_eq!(snap1.len(), 11); // 10 cases + manifest
    assert_eq!(snap1, dir_snapshot(&d2));
    let manifest = std::fs::read_to_string(d1.join("manifest.txt")).unwrap();
    assert_eq!(manifest.matches(",train").count(), 7);
    assert_eq!(manifest.matches(",test").count(), 3);
}

#[test]
fn gen_data_rejects_zero_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cdm(&[
        "gen-data",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--cases",
        "0",
        "--size",
        "16",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_out_of_order_stage_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cdm(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--cases",
        "6",
        "--size",
        "16",
    ]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ckpt = tmp.path().join("ckpt.cdmb");
    let out = cdm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--stage",
        "mdn",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_exits_2_naming_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cdm(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--cases",
        "6",
        "--size",
        "16",
    ]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "image_size=16\nnot_a_real_key=3\n").unwrap();
    let out = cdm(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--stage",
        "mrm",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        tmp.path().join("c.cdmb").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
}

#[test]
fn full_workflow_train_synthesize_evaluate_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cdm(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--cases",
        "8",
        "--size",
        "16",
        "--seed",
        "3",
    ]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ckpt = tmp.path().join("ckpt.cdmb");
    let train = |stage: &str| {
        cdm(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--stage",
            stage,
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ])
    };
    let out = train("all");
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for s in ["mrm", "mdn", "cunet"] {
        let curve = std::fs::read_to_string(tmp.path().join(format!("losses_{s}.csv"))).unwrap();
        assert!(curve.starts_with("stage,epoch,loss\n"));
    }
    // idempotence: identical checkpoint after re-running with same config
    let bytes1 = std::fs::read(&ckpt).unwrap();
    let out = train("all");
    assert_eq!(code(&out), 0);
    assert_eq!(bytes1, std::fs::read(&ckpt).unwrap());

    // synthesize a train-split case twice with the same seed
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    let case_id = manifest
        .lines()
        .find_map(|l| l.strip_prefix("case=").and_then(|r| r.strip_suffix(",train")).map(str::to_string))
        .unwrap_or_else(|| "case_0000".to_string());
    let synth = |outdir: &Path, seed: &str| {
        cdm(&[
            "synthesize",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--case",
            &case_id,
            "--seed",
            seed,
            "--out",
            outdir.to_str().unwrap(),
        ])
    };
    let o1 = tmp.path().join("s1");
    let o2 = tmp.path().join("s2");
    let out = synth(&o1, "5");
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&synth(&o2, "5")), 0);
    let files = dir_snapshot(&o1);
    assert_eq!(files.len(), 4, "expected 2 PGM + 2 raw, got {:?}", files.iter().map(|(n, _)| n).collect::<Vec<_>>());
    assert_eq!(files, dir_snapshot(&o2));
    assert!(files.iter().any(|(n, _)| n.ends_with("_T1c.pgm")));
    assert!(files.iter().any(|(n, _)| n.ends_with("_T2f.raw")));

    // unknown case ID
    let out = cdm(&[
        "synthesize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--case",
        "case_9999",
        "--seed",
        "1",
        "--out",
        tmp.path().join("s3").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);

    // evaluate
    let report = tmp.path().join("report.csv");
    let out = cdm(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("case_id,modality,psnr,ssim,mae\n"));

    // bench with a single n
    let bench_report = tmp.path().join("bench.csv");
    let out = cdm(&[
        "bench",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--n",
        "10",
        "--reps",
        "1",
        "--report",
        bench_report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&bench_report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n_sampling,seconds_per_image,fps,psnr_avg"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("10,"), "row: {row}");
}
