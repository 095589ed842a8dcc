//! Drives the `hmseg` binary through a full workflow on a miniature dataset:
//! gen, split, train, eval, audit, fuzz-triangle, and gradcheck, plus the
//! error paths a user hits first (bad config key, missing split file).

use std::path::Path;
use std::process::{Command, Output};

fn hmseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "# miniature end-to-end run\n\
         height = 32\n\
         width = 32\n\
         n_control = 6\n\
         n_lesion = 6\n\
         base_channels = 2\n\
         blocks = 1x1\n\
         patch = 16x16\n\
         iterations = 4\n\
         warmup = 1\n\
         val_every = 2\n\
         train_ratio = 0.5\n\
         val_ratio = 0.25\n\
         test_ratio = 0.25\n\
         seed = 5\n",
    )
    .unwrap();
    path
}

#[test]
fn full_workflow_through_the_binary() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path();
    write_tiny_config(dir);

    // gen twice: succeeds and reproduces files byte for byte
    assert_ok(
        &hmseg(&["gen", "--config", "tiny.cfg", "--out", "data"], dir),
        "gen",
    );
    assert_ok(
        &hmseg(&["gen", "--config", "tiny.cfg", "--out", "data2"], dir),
        "second gen",
    );
    for name in ["manifest.csv", "samples/00000.hms1", "samples/00011.hms1"] {
        let a = std::fs::read(dir.join("data").join(name)).unwrap();
        let b = std::fs::read(dir.join("data2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical gen runs");
    }

    // training before splitting fails with a hint
    let out = hmseg(
        &[
            "train", "--config", "tiny.cfg", "--data", "data", "--out", "run",
        ],
        dir,
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("hmseg split"),
        "missing-split hint, got: {stderr}"
    );

    assert_ok(
        &hmseg(&["split", "--config", "tiny.cfg", "--data", "data"], dir),
        "split",
    );

    // train in joint mode; a --iterations flag overrides the config file
    let out = hmseg(
        &[
            "train",
            "--config",
            "tiny.cfg",
            "--data",
            "data",
            "--out",
            "run",
            "--iterations",
            "3",
        ],
        dir,
    );
    assert_ok(&out, "train");
    let log = std::fs::read_to_string(dir.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "header + 3 iterations:\n{log}");
    assert!(dir.join("run/final.hmc1").exists());
    assert!(dir.join("run/best.hmc1").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("iterations = 3"),
        "echoed override:\n{stdout}"
    );

    // eval on the test split and in forced-T1 mode
    assert_ok(
        &hmseg(
            &[
                "eval",
                "--config",
                "tiny.cfg",
                "--ckpt",
                "run/final.hmc1",
                "--data",
                "data",
                "--report",
                "dsc.csv",
            ],
            dir,
        ),
        "eval",
    );
    let report = std::fs::read_to_string(dir.join("dsc.csv")).unwrap();
    assert!(report.starts_with("model,dataset,class_id,class_name,dsc,n_samples\n"));
    assert_eq!(
        report.lines().count(),
        17,
        "2 datasets x 8 classes + header:\n{report}"
    );
    assert!(report.contains("final,control-test,"));
    assert!(report.contains("final,lesion-test,"));
    assert_ok(
        &hmseg(
            &[
                "eval",
                "--config",
                "tiny.cfg",
                "--ckpt",
                "run/final.hmc1",
                "--data",
                "data",
                "--report",
                "dsc_t1.csv",
                "--split",
                "all",
                "--t1-only",
                "--model-tag",
                "probe",
            ],
            dir,
        ),
        "eval --t1-only",
    );
    assert!(std::fs::read_to_string(dir.join("dsc_t1.csv"))
        .unwrap()
        .contains("probe,lesion-all,"));

    // audit every lesion sample
    let out = hmseg(
        &[
            "audit",
            "--config",
            "tiny.cfg",
            "--ckpt",
            "run/final.hmc1",
            "--data",
            "data",
            "--report",
            "audit.csv",
        ],
        dir,
    );
    assert_ok(&out, "audit");
    let audit = std::fs::read_to_string(dir.join("audit.csv")).unwrap();
    assert!(audit.starts_with("sample_id,lhs,term1,term2,slack,triangle_ok\n"));
    assert_eq!(
        audit.lines().count(),
        7,
        "6 lesion samples + header:\n{audit}"
    );

    // one-hot fuzz: no violations expected, exit 0
    assert_ok(
        &hmseg(
            &[
                "fuzz-triangle",
                "--config",
                "tiny.cfg",
                "--report",
                "fuzz.csv",
                "--trials",
                "500",
            ],
            dir,
        ),
        "fuzz-triangle",
    );
    assert_eq!(
        std::fs::read_to_string(dir.join("fuzz.csv"))
            .unwrap()
            .lines()
            .count(),
        501
    );

    // soft fuzz: informative, exit 0 even with counterexamples
    let out = hmseg(
        &[
            "fuzz-triangle",
            "--config",
            "tiny.cfg",
            "--report",
            "fuzz_soft.csv",
            "--trials",
            "2000",
            "--soft",
            "--out",
            "counterexamples",
        ],
        dir,
    );
    assert_ok(&out, "fuzz-triangle --soft");

    // gradcheck on the tiny architecture
    let out = hmseg(&["gradcheck", "--config", "tiny.cfg"], dir);
    assert_ok(&out, "gradcheck");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("network+loss"), "{stdout}");
    assert!(stdout.contains("all gradient checks within"), "{stdout}");
}

#[test]
fn unknown_config_keys_are_fatal() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path();
    std::fs::write(dir.join("bad.cfg"), "n_control = 4\nlesion_count = 2\n").unwrap();
    let out = hmseg(&["gen", "--config", "bad.cfg", "--out", "data"], dir);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("unknown configuration key") && stderr.contains("lesion_count"),
        "{stderr}"
    );
    assert!(
        stderr.contains("bad.cfg:2"),
        "error names file and line: {stderr}"
    );
}

#[test]
fn corrupt_checkpoints_are_named_and_rejected() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path();
    write_tiny_config(dir);
    assert_ok(
        &hmseg(&["gen", "--config", "tiny.cfg", "--out", "data"], dir),
        "gen",
    );
    assert_ok(
        &hmseg(&["split", "--config", "tiny.cfg", "--data", "data"], dir),
        "split",
    );
    assert_ok(
        &hmseg(
            &[
                "train",
                "--config",
                "tiny.cfg",
                "--data",
                "data",
                "--out",
                "run",
                "--iterations",
                "1",
            ],
            dir,
        ),
        "train",
    );
    let ckpt = dir.join("run/final.hmc1");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() - 4]).unwrap();
    let out = hmseg(
        &[
            "eval",
            "--config",
            "tiny.cfg",
            "--ckpt",
            "run/final.hmc1",
            "--data",
            "data",
            "--report",
            "dsc.csv",
        ],
        dir,
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("head.kernel"),
        "names the broken parameter: {stderr}"
    );
}
