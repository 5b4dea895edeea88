//! End-to-end runs of the binary: build, groundtruth, search, bench, and
//! profile, plus the exit-code contract.

use std::path::Path;
use std::process::Command;

use juno::dataset::{gen_synthetic, read_vecs, write_vecs, Dataset, Metric, VecElem};

fn juno_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_juno"))
}

fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let all = gen_synthetic(460, 8, 4, 0.08, 9).unwrap();
    let base = Dataset::new(440, 8, all.data[..440 * 8].to_vec(), Metric::L2).unwrap();
    let queries = Dataset::new(20, 8, all.data[440 * 8..].to_vec(), Metric::L2).unwrap();
    let base_path = dir.join("base.fvecs");
    let query_path = dir.join("queries.fvecs");
    write_vecs(&base_path, &base, VecElem::Float32).unwrap();
    write_vecs(&query_path, &queries, VecElem::Float32).unwrap();
    (base_path, query_path)
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let (base, queries) = write_fixture(dir.path());
    let index = dir.path().join("index.juno");
    let gt = dir.path().join("gt.ivecs");
    let result = dir.path().join("result.ivecs");

    let status = juno_bin()
        .args(["build", "--base"])
        .arg(&base)
        .args(["--metric", "l2", "--clusters", "4", "--entries", "16", "--seed", "7", "--out"])
        .arg(&index)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(index.exists());

    let status = juno_bin()
        .args(["groundtruth", "--base"])
        .arg(&base)
        .arg("--queries")
        .arg(&queries)
        .args(["--k", "10", "--metric", "l2", "--out"])
        .arg(&gt)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(gt.exists());
    assert!(dir.path().join("gt.fvecs").exists());

    let status = juno_bin()
        .args(["search", "--index"])
        .arg(&index)
        .arg("--queries")
        .arg(&queries)
        .args(["--k", "10", "--nprobs", "4", "--scale", "2.0", "--mode", "h", "--out"])
        .arg(&result)
        .status()
        .unwrap();
    assert!(status.success());

    // Retrieved ids at generous settings should mostly contain the true NN.
    let ids = read_vecs(&result, VecElem::Int32).unwrap();
    let truth = read_vecs(&gt, VecElem::Int32).unwrap();
    assert_eq!(ids.n, 20);
    assert_eq!(ids.d, 10);
    let mut hits = 0;
    for q in 0..20 {
        let nn = truth.row(q)[0];
        if ids.row(q).contains(&nn) {
            hits += 1;
        }
    }
    assert!(hits >= 18, "only {}/20 queries kept the true NN", hits);
    assert!(dir.path().join("result.fvecs").exists());

    // Profile against the ground truth.
    let profile_dir = dir.path().join("profile");
    let status = juno_bin()
        .args(["profile", "--index"])
        .arg(&index)
        .arg("--queries")
        .arg(&queries)
        .arg("--gt")
        .arg(&gt)
        .arg("--out-dir")
        .arg(&profile_dir)
        .status()
        .unwrap();
    assert!(status.success());
    for file in ["entry_usage.csv", "entry_usage_by_rank.csv", "locality_cdf.csv"] {
        assert!(profile_dir.join(file).exists(), "{} missing", file);
    }

    // Bench sweep reusing the same files.
    let cfg = dir.path().join("bench.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"base": {:?}, "queries": {:?}, "groundtruth": {:?}, "metric": "l2",
                "clusters": 4, "entries": 16, "nprobs_list": [1, 4], "scale_list": [0.5, 2.0],
                "modes": ["h", "l"], "k": 10, "seed": 7, "threads": 2}}"#,
            base, queries, gt
        ),
    )
    .unwrap();
    let out_prefix = dir.path().join("report");
    let output = juno_bin()
        .args(["bench", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_prefix)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("broken.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let output = juno_bin()
        .args(["bench", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("config error"), "stderr: {}", stderr);
    assert!(stderr.contains(":1:"), "no line diagnostics: {}", stderr);
}

#[test]
fn runtime_errors_exit_one() {
    let output = juno_bin()
        .args([
            "search",
            "--index",
            "/nonexistent/index.juno",
            "--queries",
            "/nonexistent/q.fvecs",
            "--k",
            "5",
            "--nprobs",
            "1",
            "--out",
            "/tmp/never.ivecs",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    let output = juno_bin().args(["search", "--bogus-flag"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}
