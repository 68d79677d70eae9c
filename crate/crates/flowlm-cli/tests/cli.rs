//! Exit-code contract checks: 0 ok, 1 data/validation, 2 usage/IO,
//! 3 fingerprint mismatch.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn flowlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlm"))
        .args(args)
        .env_remove("FLOWLM_DATA_DIR")
        .output()
        .expect("spawn flowlm")
}

fn assert_exit(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: stderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny labeled fixture plus a fitted discretizer and 5-step classifier.
fn trained_fixture(dir: &Path) -> (String, String, String) {
    let train = dir.join("train.csv");
    let disc = dir.join("disc.json");
    let ft = dir.join("ft");
    for (args, what) in [
        (
            vec![
                "synth", "--kind", "port-rule", "--rows", "400", "--seed", "6",
                "--output", path_str(&train),
            ],
            "synth",
        ),
        (
            vec![
                "fit-discretizer", "--input", path_str(&train), "--domain",
                "cidds1-internal", "--bins", "8", "--output", path_str(&disc),
            ],
            "fit",
        ),
        (
            vec![
                "finetune", "--input", path_str(&train), "--domain", "cidds1-internal",
                "--discretizer", path_str(&disc), "--out-dir", path_str(&ft),
                "--steps", "5", "--batch-size", "4", "--seq-len", "8",
                "--embed-dim", "4", "--layers", "1", "--heads", "2",
                "--ffn-dim", "24", "--max-seq-len", "8", "--seed", "1",
            ],
            "finetune",
        ),
    ] {
        let out = flowlm(&args);
        assert_exit(&out, 0, what);
    }
    (
        train.to_str().unwrap().to_string(),
        disc.to_str().unwrap().to_string(),
        ft.join("final").to_str().unwrap().to_string(),
    )
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = flowlm(&["ingest", "--input", "/nonexistent/flows.csv", "--domain", "cidds2"]);
    assert_exit(&out, 2, "missing file");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("error:"),
        "diagnostic expected"
    );
}

#[test]
fn strict_mode_names_the_bad_row() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    let mut f = std::fs::File::create(&bad).unwrap();
    writeln!(f, "{}", flowlm::synth::CIDDS_HEADER.join(",")).unwrap();
    writeln!(f, "2017-03-15 00:00:00.000,0.05,TCP,1.2.3.4,52000,5.6.7.8,80,5,400,1,.AP.SF,0,normal,---,---,---").unwrap();
    writeln!(f, "2017-03-15 00:00:01.000,0.05,TCP,1.2.3.4,oops,5.6.7.8,80,5,400,1,.AP.SF,0,normal,---,---,---").unwrap();
    drop(f);

    let strict = flowlm(&[
        "ingest", "--input", path_str(&bad), "--domain", "cidds1-internal", "--strict",
    ]);
    assert_exit(&strict, 1, "strict bad row");
    assert!(
        String::from_utf8_lossy(&strict.stderr).contains("row 3"),
        "row number expected in: {}",
        String::from_utf8_lossy(&strict.stderr)
    );

    let lenient = flowlm(&["ingest", "--input", path_str(&bad), "--domain", "cidds1-internal"]);
    assert_exit(&lenient, 0, "lenient skips the row");
}

#[test]
fn mismatched_discretizer_is_a_fingerprint_error() {
    let dir = TempDir::new().unwrap();
    let (train, _disc, ckpt) = trained_fixture(dir.path());

    let other_disc = dir.path().join("other.json");
    let out = flowlm(&[
        "fit-discretizer", "--input", &train, "--domain", "cidds1-internal",
        "--bins", "4", "--output", path_str(&other_disc),
    ]);
    assert_exit(&out, 0, "fit different bins");

    let sets = format!("cidds1-internal={train}");
    let eval = flowlm(&[
        "evaluate", "--checkpoint", &ckpt, "--discretizer", path_str(&other_disc),
        "--sets", &sets,
    ]);
    assert_exit(&eval, 3, "discretizer mismatch");

    let resume = flowlm(&[
        "finetune", "--input", &train, "--domain", "cidds1-internal",
        "--discretizer", path_str(&other_disc), "--resume", &ckpt,
        "--out-dir", path_str(&dir.path().join("ft2")), "--steps", "6",
        "--batch-size", "4", "--seq-len", "8",
    ]);
    assert_exit(&resume, 3, "resume against the wrong discretizer");
}

#[test]
fn pretrained_checkpoints_cannot_be_evaluated() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("train.csv");
    let disc = dir.path().join("disc.json");
    let pre = dir.path().join("pre");
    assert_exit(
        &flowlm(&[
            "synth", "--kind", "parity", "--rows", "200", "--seed", "2",
            "--output", path_str(&train),
        ]),
        0,
        "synth",
    );
    assert_exit(
        &flowlm(&[
            "fit-discretizer", "--input", path_str(&train), "--domain",
            "cidds1-internal", "--bins", "4", "--output", path_str(&disc),
        ]),
        0,
        "fit",
    );
    assert_exit(
        &flowlm(&[
            "pretrain", "--input", path_str(&train), "--domain", "cidds1-internal",
            "--discretizer", path_str(&disc), "--out-dir", path_str(&pre),
            "--steps", "3", "--batch-size", "4", "--seq-len", "8",
            "--embed-dim", "4", "--layers", "1", "--heads", "2",
            "--ffn-dim", "24", "--max-seq-len", "8", "--seed", "1",
        ]),
        0,
        "pretrain",
    );

    let sets = format!("cidds1-internal={}", path_str(&train));
    let eval = flowlm(&[
        "evaluate", "--checkpoint", path_str(&pre.join("final")),
        "--discretizer", path_str(&disc), "--sets", &sets,
    ]);
    assert_exit(&eval, 3, "pretrained phase rejected");
}

#[test]
fn oversubscribed_split_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("train.csv");
    assert_exit(
        &flowlm(&[
            "synth", "--kind", "port-rule", "--rows", "100", "--seed", "8",
            "--output", path_str(&train),
        ]),
        0,
        "synth",
    );
    let out = flowlm(&[
        "make-splits", "--input", path_str(&train), "--domain", "cidds1-internal",
        "--composition", r#"{"normal": 90, "dos": 90}"#, "--num-sets", "1",
        "--out-dir", path_str(&dir.path().join("sets")),
    ]);
    assert_exit(&out, 1, "insufficient labels");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("under-represented"),
        "counts expected in the diagnostic"
    );
}
