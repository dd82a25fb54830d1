use std::path::Path;
use std::process::{Command, Output};

use l2t::pipeline::persist::load_report;

fn l2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2t")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = l2t(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn missing_store_reports_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l2t(&["featurize", "--store", &p(tmp.path(), "nope"), "--out", &p(tmp.path(), "f"), "--r", "3"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("nope"), "{err}");
}

#[test]
fn unknown_extractor_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = l2t(&["gen", "--n", "1", "--out", &p(tmp.path(), "s"), "--extractors", "magic"]);
    assert!(!out.status.success());
}

#[test]
fn grad_check_passes() {
    let stdout = ok(&["grad-check", "--seed", "4", "--trials", "3"]);
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn eval_report_means_are_row_means() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let small = ["--m", "12", "--u-true", "3", "--samples-per-class", "10"];
    let mut gen = vec!["gen", "--n", "6", "--out", "", "--seed", "1", "--extractors", "joint_pca,target_pca", "--n-labeled", "3,6"];
    let store = p(t, "store");
    gen[4] = &store;
    gen.extend_from_slice(&small);
    ok(&gen);
    ok(&["featurize", "--store", &store, "--out", &p(t, "feat"), "--r", "3", "--correct", "--p", "3", "--q", "20"]);
    ok(&["train", "--features", &p(t, "feat"), "--out", &p(t, "model"), "--restarts", "2", "--max-iters", "200"]);
    let pairs = p(t, "pairs");
    let mut gp = vec!["gen-pairs", "--n", "2", "--out", &pairs, "--seed", "3"];
    gp.extend_from_slice(&small);
    ok(&gp);
    let report = p(t, "report.toml");
    ok(&[
        "eval", "--model", &p(t, "model"), "--test-pairs", &pairs, "--n-labeled", "3,6", "--report", &report,
        "--max-iters", "10",
    ]);
    let rep = load_report(Path::new(&report)).unwrap();
    assert_eq!(rep.rows.len(), 2 * 2 * 3);
    assert_eq!(rep.means.len(), 2 * 3);
    for m in &rep.means {
        let vals: Vec<f64> = rep
            .rows
            .iter()
            .filter(|r| r.method == m.method && r.n_labeled == m.n_labeled)
            .map(|r| r.ratio)
            .collect();
        assert_eq!(vals.len(), 2);
        assert_eq!(m.mean, vals.iter().sum::<f64>() / 2.0);
    }
}
