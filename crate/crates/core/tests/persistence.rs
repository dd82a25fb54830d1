use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use l2t::pipeline::persist::*;
use l2t::pipeline::{generate_experiences, EvalReport, MeanRow, ReportRow};
use l2t::reflection::{train_reflection_traced, CorrectionConfig};
use l2t::{Domain, ExtractorId, SynthConfig, TrainConfig};

fn synth() -> SynthConfig {
    SynthConfig {
        m: 10,
        u_true: 3,
        samples_per_class: 8,
        ..Default::default()
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn store_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let store = generate_experiences(3, &ExtractorId::ALL, &synth(), &[3, 5], 12).unwrap();
    save_store(&store, &tmp.path().join("a")).unwrap();
    let back = load_store(&tmp.path().join("a")).unwrap();
    assert_eq!(back.len(), 3);
    for (x, y) in store.experiences.iter().zip(&back.experiences) {
        assert_eq!(x.extractor, y.extractor);
        assert_eq!(x.ratio.to_bits(), y.ratio.to_bits());
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.n_labeled, y.n_labeled);
        assert_eq!(x.w, y.w);
        assert_eq!(x.source, y.source);
        assert_eq!(x.target, y.target);
    }
    assert_eq!(back, store);
    save_store(&back, &tmp.path().join("b")).unwrap();
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
}

#[test]
fn empty_store_has_a_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let store = generate_experiences(0, &[ExtractorId::JointPca], &synth(), &[3], 0).unwrap();
    save_store(&store, tmp.path()).unwrap();
    let back = load_store(tmp.path()).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.exponents.len(), 33);
}

#[test]
fn truncated_matrix_is_a_dimension_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.l2tm");
    write_matrix(&p, &DMatrix::from_element(4, 3, 1.5)).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
    let msg = read_matrix(&p).unwrap_err().to_string();
    assert!(msg.contains("dimensions") && msg.contains("m.l2tm"), "{msg}");
}

#[test]
fn corrupt_store_file_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let store = generate_experiences(1, &[ExtractorId::TargetPca], &synth(), &[3], 1).unwrap();
    save_store(&store, tmp.path()).unwrap();
    let w = tmp.path().join("e0000").join("w.l2tm");
    let mut bytes = fs::read(&w).unwrap();
    bytes[0] = b'Z';
    fs::write(&w, bytes).unwrap();
    let msg = load_store(tmp.path()).unwrap_err().to_string();
    assert!(msg.contains("w.l2tm") && msg.contains("magic"), "{msg}");
}

#[test]
fn wrong_manifest_kind_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let store = generate_experiences(1, &[ExtractorId::TargetPca], &synth(), &[3], 1).unwrap();
    save_store(&store, tmp.path()).unwrap();
    fs::rename(tmp.path().join("manifest.toml"), tmp.path().join("features.toml")).unwrap();
    let msg = load_features(tmp.path()).unwrap_err().to_string();
    assert!(msg.contains("features.toml"), "{msg}");
}

#[test]
fn labels_must_be_class_indices() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("l.l2tm");
    write_matrix(&p, &DMatrix::from_column_slice(3, 1, &[0.0, 1.5, 2.0])).unwrap();
    assert!(read_labels(&p).unwrap_err().to_string().contains("labels"));
    write_labels(&p, &[2, 0, 1]).unwrap();
    assert_eq!(read_labels(&p).unwrap(), vec![2, 0, 1]);
}

#[test]
fn unlabeled_pair_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let s = Domain::new(DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64), Some(vec![0, 1, 0, 1]), "src").unwrap();
    let t = Domain::new(DMatrix::from_fn(5, 3, |i, j| (i * j) as f64 - 0.5), None, "tgt").unwrap();
    save_pair(tmp.path(), &s, &t).unwrap();
    let (s2, t2) = load_pair(tmp.path()).unwrap();
    assert_eq!((s2, t2), (s, t));
}

#[test]
fn features_and_model_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let store = generate_experiences(4, &ExtractorId::ALL, &synth(), &[3], 5).unwrap();
    let set = FeatureSet {
        features: store.featurize_all(3).unwrap(),
        exponents: store.exponents.clone(),
        r: 3,
        m: 10,
        u: 3,
        extractors: store.extractors.clone(),
        correction: CorrectionConfig::default(),
    };
    save_features(&set, &tmp.path().join("f1")).unwrap();
    let back = load_features(&tmp.path().join("f1")).unwrap();
    assert_eq!(back, set);
    save_features(&back, &tmp.path().join("f2")).unwrap();
    assert_eq!(tree(&tmp.path().join("f1")), tree(&tmp.path().join("f2")));

    let cfg = TrainConfig {
        max_iters: 50,
        ..Default::default()
    };
    let out = train_reflection_traced(&set.features, &cfg).unwrap();
    let art = ModelArtifact {
        model: out.model,
        correction: CorrectionConfig::default(),
        m: 10,
        u: 3,
        r: 3,
        extractors: set.extractors.clone(),
        gamma1: cfg.gamma1,
        huber_delta: cfg.huber_delta,
        objective: out.objective,
    };
    save_model(&art, &tmp.path().join("m1")).unwrap();
    let back = load_model(&tmp.path().join("m1")).unwrap();
    assert_eq!(back, art);
    save_model(&back, &tmp.path().join("m2")).unwrap();
    assert_eq!(tree(&tmp.path().join("m1")), tree(&tmp.path().join("m2")));
}

#[test]
fn report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let rep = EvalReport {
        rows: vec![ReportRow {
            pair: "p0000".into(),
            method: "l2t".into(),
            n_labeled: 3,
            ratio: 1.0 / 3.0,
            floored: false,
        }],
        means: vec![MeanRow {
            method: "l2t".into(),
            n_labeled: 3,
            mean: 1.0 / 3.0,
        }],
    };
    let p = tmp.path().join("nested").join("report.toml");
    save_report(&rep, &p).unwrap();
    assert_eq!(load_report(&p).unwrap(), rep);
}
