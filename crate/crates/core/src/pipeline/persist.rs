//! On-disk formats.
//!
//! Matrices are binary files: the magic `L2TM`, a `u32` version, `u64` row
//! and column counts, then the values in row-major order, all little-endian.
//! Label vectors are stored as `n x 1` matrices. Every directory artifact
//! carries a TOML manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Domain, EvalReport, Experience, ExperienceStore, SynthConfig, TestPair};
use crate::error::{Error, Result};
use crate::factors::{ExtractorId, FactorMatrix};
use crate::kernels::KernelBank;
use crate::reflection::{CorrectionConfig, ReflectionModel};
use crate::stats::ExperienceFeatures;

pub const MAGIC: &[u8; 4] = b"L2TM";
pub const MATRIX_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

pub const PAIR_MANIFEST: &str = "pair.toml";
pub const STORE_MANIFEST: &str = "manifest.toml";
pub const FEATURES_MANIFEST: &str = "features.toml";
pub const MODEL_MANIFEST: &str = "model.toml";

/// Seeds are written as decimal strings because TOML integers are signed.
pub mod seed_str {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            "header",
            format!("{} bytes, expected at least {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "magic", format!("{:?}, expected \"L2TM\"", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::format(
            path,
            "version",
            format!("{version}, expected {MATRIX_VERSION}"),
        ));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = (bytes.len() - HEADER_LEN) as u64;
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
    if expected != Some(body) {
        return Err(Error::format(
            path,
            "dimensions",
            format!("header declares {rows} x {cols} but the file holds {body} data bytes"),
        ));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let data = &bytes[HEADER_LEN..];
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let at = 8 * (i * cols + j);
        f64::from_le_bytes(data[at..at + 8].try_into().unwrap())
    }))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_bytes(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

fn read_matrix_shaped(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let m = read_matrix(path)?;
    if m.shape() != (rows, cols) {
        return Err(Error::format(
            path,
            "dimensions",
            format!("{} x {}, expected {rows} x {cols}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let col = DMatrix::from_iterator(labels.len(), 1, labels.iter().map(|&l| l as f64));
    write_matrix(path, &col)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::format(path, "dimensions", format!("labels must be one column, found {}", m.ncols())));
    }
    m.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::format(path, "labels", format!("{v} is not a class index")))
            }
        })
        .collect()
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path, "manifest", e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, "manifest", e.to_string()))
}

fn check_header(path: &Path, kind: &str, found_kind: &str, version: u32) -> Result<()> {
    if found_kind != kind {
        return Err(Error::format(path, "kind", format!("`{found_kind}`, expected `{kind}`")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::format(path, "format_version", format!("{version}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- pairs

#[derive(Serialize, Deserialize)]
struct PairManifest {
    format_version: u32,
    kind: String,
    m: usize,
    source_name: String,
    source_rows: usize,
    source_labeled: bool,
    target_name: String,
    target_rows: usize,
    target_labeled: bool,
}

fn save_domain(dir: &Path, stem: &str, d: &Domain) -> Result<()> {
    write_matrix(&dir.join(format!("{stem}.l2tm")), d.features())?;
    if let Some(l) = d.labels() {
        write_labels(&dir.join(format!("{stem}_labels.l2tm")), l)?;
    }
    Ok(())
}

fn load_domain(dir: &Path, stem: &str, rows: usize, m: usize, labeled: bool, name: &str) -> Result<Domain> {
    let path = dir.join(format!("{stem}.l2tm"));
    let x = read_matrix_shaped(&path, rows, m)?;
    let labels = if labeled {
        let lp = dir.join(format!("{stem}_labels.l2tm"));
        let l = read_labels(&lp)?;
        if l.len() != rows {
            return Err(Error::format(lp, "dimensions", format!("{} labels for {rows} rows", l.len())));
        }
        Some(l)
    } else {
        None
    };
    Domain::new(x, labels, name).map_err(|e| Error::format(path, "values", e.to_string()))
}

pub fn save_pair(dir: &Path, source: &Domain, target: &Domain) -> Result<()> {
    if source.dim() != target.dim() {
        return Err(Error::shape("source and target feature dimensions differ"));
    }
    create_dir(dir)?;
    write_toml(
        &dir.join(PAIR_MANIFEST),
        &PairManifest {
            format_version: FORMAT_VERSION,
            kind: "pair".into(),
            m: source.dim(),
            source_name: source.name().into(),
            source_rows: source.rows(),
            source_labeled: source.labels().is_some(),
            target_name: target.name().into(),
            target_rows: target.rows(),
            target_labeled: target.labels().is_some(),
        },
    )?;
    save_domain(dir, "source", source)?;
    save_domain(dir, "target", target)
}

pub fn load_pair(dir: &Path) -> Result<(Domain, Domain)> {
    let mpath = dir.join(PAIR_MANIFEST);
    let man: PairManifest = read_toml(&mpath)?;
    check_header(&mpath, "pair", &man.kind, man.format_version)?;
    let s = load_domain(dir, "source", man.source_rows, man.m, man.source_labeled, &man.source_name)?;
    let t = load_domain(dir, "target", man.target_rows, man.m, man.target_labeled, &man.target_name)?;
    Ok((s, t))
}

/// Loads every pair subdirectory of `dir` in name order.
pub fn load_test_pairs(dir: &Path) -> Result<Vec<TestPair>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.join(PAIR_MANIFEST).is_file())
        .collect();
    subdirs.sort();
    subdirs
        .into_iter()
        .map(|p| {
            let (source, target) = load_pair(&p)?;
            let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(TestPair { id, source, target })
        })
        .collect()
}

pub fn pair_dir_name(index: usize) -> String {
    format!("p{index:04}")
}

// ---------------------------------------------------------------- store

#[derive(Serialize, Deserialize)]
struct ExperienceRecord {
    id: String,
    extractor: ExtractorId,
    n_labeled: usize,
    ratio: f64,
    #[serde(with = "seed_str")]
    seed: u64,
    floored: bool,
    u: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    format_version: u32,
    kind: String,
    n_experiences: usize,
    n_algorithms: usize,
    m: usize,
    u: usize,
    extractors: Vec<ExtractorId>,
    n_labeled_choices: Vec<usize>,
    #[serde(with = "seed_str")]
    seed: u64,
    bandwidth_exponents: Vec<f64>,
    synth: SynthConfig,
    experiences: Vec<ExperienceRecord>,
}

fn experience_id(index: usize) -> String {
    format!("e{index:04}")
}

pub fn save_store(store: &ExperienceStore, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut records = Vec::with_capacity(store.len());
    for (i, e) in store.experiences.iter().enumerate() {
        let id = experience_id(i);
        let sub = dir.join(&id);
        save_pair(&sub, &e.source, &e.target)?;
        write_matrix(&sub.join("w.l2tm"), e.w.as_matrix())?;
        records.push(ExperienceRecord {
            id,
            extractor: e.extractor,
            n_labeled: e.n_labeled,
            ratio: e.ratio,
            seed: e.seed,
            floored: e.floored,
            u: e.w.u(),
        });
    }
    write_toml(
        &dir.join(STORE_MANIFEST),
        &StoreManifest {
            format_version: FORMAT_VERSION,
            kind: "experience_store".into(),
            n_experiences: store.len(),
            n_algorithms: store.extractors.len(),
            m: store.m(),
            u: store.u(),
            extractors: store.extractors.clone(),
            n_labeled_choices: store.n_labeled_choices.clone(),
            seed: store.seed,
            bandwidth_exponents: store.exponents.clone(),
            synth: store.synth.clone(),
            experiences: records,
        },
    )
}

pub fn load_store(dir: &Path) -> Result<ExperienceStore> {
    let mpath = dir.join(STORE_MANIFEST);
    let man: StoreManifest = read_toml(&mpath)?;
    check_header(&mpath, "experience_store", &man.kind, man.format_version)?;
    if man.experiences.len() != man.n_experiences {
        return Err(Error::format(
            &mpath,
            "n_experiences",
            format!("{} declared, {} listed", man.n_experiences, man.experiences.len()),
        ));
    }
    let experiences = man
        .experiences
        .iter()
        .map(|r| {
            let sub = dir.join(&r.id);
            let (source, target) = load_pair(&sub)?;
            let wpath = sub.join("w.l2tm");
            let w = FactorMatrix::new(read_matrix_shaped(&wpath, source.dim(), r.u)?)
                .map_err(|e| Error::format(&wpath, "values", e.to_string()))?;
            Ok(Experience {
                source,
                target,
                extractor: r.extractor,
                w,
                n_labeled: r.n_labeled,
                ratio: r.ratio,
                seed: r.seed,
                floored: r.floored,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperienceStore {
        experiences,
        extractors: man.extractors,
        synth: man.synth,
        n_labeled_choices: man.n_labeled_choices,
        seed: man.seed,
        exponents: man.bandwidth_exponents,
    })
}

// ---------------------------------------------------------------- features

/// Featurised experiences plus the settings the model needs downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<ExperienceFeatures>,
    pub exponents: Vec<f64>,
    pub r: usize,
    pub m: usize,
    pub u: usize,
    pub extractors: Vec<ExtractorId>,
    pub correction: CorrectionConfig,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    id: String,
    bandwidth_scale: f64,
    ratio: f64,
    inverse_ratio_target: f64,
    n_labeled: usize,
}

#[derive(Serialize, Deserialize)]
struct FeaturesManifest {
    format_version: u32,
    kind: String,
    n_experiences: usize,
    n_kernels: usize,
    bandwidth_exponents: Vec<f64>,
    r: usize,
    m: usize,
    u: usize,
    extractors: Vec<ExtractorId>,
    correct: bool,
    p: u32,
    q: u32,
    experiences: Vec<FeatureRecord>,
}

pub fn save_features(set: &FeatureSet, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let nk = set.exponents.len();
    let mut records = Vec::with_capacity(set.features.len());
    for (i, f) in set.features.iter().enumerate() {
        if f.kernel_count() != nk || f.bank.exponents() != set.exponents.as_slice() {
            return Err(Error::shape(format!("experience {i} was featurised with a different bandwidth grid")));
        }
        let id = experience_id(i);
        write_matrix(&dir.join(format!("{id}_mmd.l2tm")), &DMatrix::from_column_slice(nk, 1, f.mmd.as_slice()))?;
        write_matrix(&dir.join(format!("{id}_variance.l2tm")), &f.variance)?;
        write_matrix(
            &dir.join(format!("{id}_discriminant.l2tm")),
            &DMatrix::from_column_slice(nk, 1, f.discriminant.as_slice()),
        )?;
        records.push(FeatureRecord {
            id,
            bandwidth_scale: f.bank.scale(),
            ratio: f.ratio,
            inverse_ratio_target: f.inverse_ratio_target,
            n_labeled: f.n_labeled,
        });
    }
    write_toml(
        &dir.join(FEATURES_MANIFEST),
        &FeaturesManifest {
            format_version: FORMAT_VERSION,
            kind: "features".into(),
            n_experiences: set.features.len(),
            n_kernels: nk,
            bandwidth_exponents: set.exponents.clone(),
            r: set.r,
            m: set.m,
            u: set.u,
            extractors: set.extractors.clone(),
            correct: set.correction.enabled,
            p: set.correction.p,
            q: set.correction.q,
            experiences: records,
        },
    )
}

fn read_column(path: &Path, n: usize) -> Result<DVector<f64>> {
    Ok(DVector::from_column_slice(read_matrix_shaped(path, n, 1)?.as_slice()))
}

pub fn load_features(dir: &Path) -> Result<FeatureSet> {
    let mpath = dir.join(FEATURES_MANIFEST);
    let man: FeaturesManifest = read_toml(&mpath)?;
    check_header(&mpath, "features", &man.kind, man.format_version)?;
    let nk = man.n_kernels;
    if man.bandwidth_exponents.len() != nk {
        return Err(Error::format(&mpath, "bandwidth_exponents", format!("expected {nk} entries")));
    }
    let features = man
        .experiences
        .iter()
        .map(|r| {
            let bank = KernelBank::with_exponents(man.bandwidth_exponents.clone(), r.bandwidth_scale)
                .map_err(|e| Error::format(&mpath, "bandwidth_scale", e.to_string()))?;
            Ok(ExperienceFeatures {
                mmd: read_column(&dir.join(format!("{}_mmd.l2tm", r.id)), nk)?,
                variance: read_matrix_shaped(&dir.join(format!("{}_variance.l2tm", r.id)), nk, nk)?,
                discriminant: read_column(&dir.join(format!("{}_discriminant.l2tm", r.id)), nk)?,
                inverse_ratio_target: r.inverse_ratio_target,
                ratio: r.ratio,
                n_labeled: r.n_labeled,
                bank,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet {
        features,
        exponents: man.bandwidth_exponents,
        r: man.r,
        m: man.m,
        u: man.u,
        extractors: man.extractors,
        correction: CorrectionConfig {
            p: man.p,
            q: man.q,
            b_corr: 0.0,
            enabled: man.correct,
        },
    })
}

// ---------------------------------------------------------------- model

/// A trained reflection function with the settings inference must reuse.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub model: ReflectionModel,
    pub correction: CorrectionConfig,
    pub m: usize,
    pub u: usize,
    pub r: usize,
    pub extractors: Vec<ExtractorId>,
    pub gamma1: f64,
    pub huber_delta: f64,
    pub objective: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    kind: String,
    n_kernels: usize,
    bandwidth_exponents: Vec<f64>,
    lambda: f64,
    mu: f64,
    bias: f64,
    correct: bool,
    p: u32,
    q: u32,
    b_corr: f64,
    m: usize,
    u: usize,
    r: usize,
    extractors: Vec<ExtractorId>,
    gamma1: f64,
    huber_delta: f64,
    objective: f64,
}

pub fn save_model(art: &ModelArtifact, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let m = &art.model;
    let nk = m.kernel_count();
    write_matrix(&dir.join("beta.l2tm"), &DMatrix::from_column_slice(nk, 1, m.beta.as_slice()))?;
    write_toml(
        &dir.join(MODEL_MANIFEST),
        &ModelManifest {
            format_version: FORMAT_VERSION,
            kind: "reflection_model".into(),
            n_kernels: nk,
            bandwidth_exponents: m.bank.exponents().to_vec(),
            lambda: m.lambda,
            mu: m.mu,
            bias: m.bias,
            correct: art.correction.enabled,
            p: art.correction.p,
            q: art.correction.q,
            b_corr: art.correction.b_corr,
            m: art.m,
            u: art.u,
            r: art.r,
            extractors: art.extractors.clone(),
            gamma1: art.gamma1,
            huber_delta: art.huber_delta,
            objective: art.objective,
        },
    )
}

pub fn load_model(dir: &Path) -> Result<ModelArtifact> {
    let mpath = dir.join(MODEL_MANIFEST);
    let man: ModelManifest = read_toml(&mpath)?;
    check_header(&mpath, "reflection_model", &man.kind, man.format_version)?;
    if man.bandwidth_exponents.len() != man.n_kernels {
        return Err(Error::format(&mpath, "bandwidth_exponents", format!("expected {} entries", man.n_kernels)));
    }
    let beta = read_column(&dir.join("beta.l2tm"), man.n_kernels)?;
    let bank = KernelBank::with_exponents(man.bandwidth_exponents, 1.0)
        .map_err(|e| Error::format(&mpath, "bandwidth_exponents", e.to_string()))?;
    let model = ReflectionModel::new(beta, man.lambda, man.mu, man.bias, bank)
        .map_err(|e| Error::format(&mpath, "parameters", e.to_string()))?;
    Ok(ModelArtifact {
        model,
        correction: CorrectionConfig {
            p: man.p,
            q: man.q,
            b_corr: man.b_corr,
            enabled: man.correct,
        },
        m: man.m,
        u: man.u,
        r: man.r,
        extractors: man.extractors,
        gamma1: man.gamma1,
        huber_delta: man.huber_delta,
        objective: man.objective,
    })
}

// ---------------------------------------------------------------- report

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_toml(path, report)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    read_toml(path)
}
