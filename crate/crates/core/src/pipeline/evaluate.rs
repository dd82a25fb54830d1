//! Comparing inferred factor matrices against the base extractors on
//! held-out domain pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classify::{improvement_ratio, SourceMode};
use super::experience::derive_seed;
use super::Domain;
use crate::error::Result;
use crate::factors::{ExtractorId, FactorMatrix};
use crate::inference::{infer_w, InferConfig};
use crate::reflection::ReflectionModel;

/// Method name used for the inferred factor matrix in reports.
pub const L2T_METHOD: &str = "l2t";

#[derive(Clone, Debug, PartialEq)]
pub struct TestPair {
    pub id: String,
    pub source: Domain,
    pub target: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub pair: String,
    pub method: String,
    pub n_labeled: usize,
    pub ratio: f64,
    pub floored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub method: String,
    pub n_labeled: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub means: Vec<MeanRow>,
}

impl EvalReport {
    pub fn mean(&self, method: &str, n_labeled: usize) -> Option<f64> {
        self.means
            .iter()
            .find(|m| m.method == method && m.n_labeled == n_labeled)
            .map(|m| m.mean)
    }

    /// Highest mean among the methods other than the inferred one.
    pub fn best_base_mean(&self, n_labeled: usize) -> Option<f64> {
        self.means
            .iter()
            .filter(|m| m.method != L2T_METHOD && m.n_labeled == n_labeled)
            .map(|m| m.mean)
            .max_by(f64::total_cmp)
    }
}

const SPLIT_STREAM: u64 = 0;
const INFER_STREAM: u64 = 1;
const EXTRACTOR_STREAM: u64 = 2;

fn pair_seed(seed: u64, index: usize, stream: u64) -> u64 {
    derive_seed(derive_seed(seed, index as u64), stream)
}

/// Split seed of pair `index` in replication `rep`.
pub fn split_seed(seed: u64, index: usize, rep: usize) -> u64 {
    derive_seed(pair_seed(seed, index, SPLIT_STREAM), rep as u64)
}

/// The factor matrix of every method for one pair: the inferred one first,
/// then one per base extractor.
pub fn method_factors(
    model: &ReflectionModel,
    pair: &TestPair,
    index: usize,
    base: &[ExtractorId],
    cfg: &InferConfig,
    seed: u64,
) -> Result<Vec<(String, FactorMatrix)>> {
    let icfg = InferConfig {
        seed: pair_seed(seed, index, INFER_STREAM),
        ..cfg.clone()
    };
    let mut methods = vec![(L2T_METHOD.to_string(), infer_w(&pair.source, &pair.target, model, &icfg)?)];
    let extractor_seed = pair_seed(seed, index, EXTRACTOR_STREAM);
    for &id in base {
        let w = id.extract(pair.source.features(), pair.target.features(), cfg.u, extractor_seed)?;
        methods.push((id.token().to_string(), w));
    }
    Ok(methods)
}

fn score(pair: &TestPair, methods: &[(String, FactorMatrix)], n_labeled: &[usize], split: u64) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &nl in n_labeled {
        for (name, w) in methods {
            let out = improvement_ratio(&pair.source, &pair.target, w, nl, split, SourceMode::Include)?;
            rows.push(ReportRow {
                pair: pair.id.clone(),
                method: name.clone(),
                n_labeled: nl,
                ratio: out.ratio,
                floored: out.floored,
            });
        }
    }
    Ok(rows)
}

fn summarise(rows: Vec<ReportRow>, methods: &[String], n_labeled: &[usize]) -> EvalReport {
    let mut means = Vec::new();
    if !rows.is_empty() {
        for &nl in n_labeled {
            for name in methods {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.n_labeled == nl && &r.method == name)
                    .map(|r| r.ratio)
                    .collect();
                means.push(MeanRow {
                    method: name.clone(),
                    n_labeled: nl,
                    mean: vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    EvalReport { rows, means }
}

/// Infers a factor matrix for every pair, then scores it and each base
/// extractor's matrix at every labelled count. Within a pair all methods
/// share one labelled split per count, and the split for a smaller count is
/// a subset of the split for a larger one. Rows are ordered by pair, then
/// labelled count, then method (inferred first).
pub fn evaluate_l2t(
    model: &ReflectionModel,
    pairs: &[TestPair],
    base: &[ExtractorId],
    n_labeled: &[usize],
    cfg: &InferConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut reports = evaluate_replicated(model, pairs, base, n_labeled, cfg, seed, 1)?;
    Ok(reports.remove(0))
}

/// Like [`evaluate_l2t`] but scores the same factor matrices on
/// `replications` independent labelled splits, one report per split.
/// Report 0 equals the output of [`evaluate_l2t`].
pub fn evaluate_replicated(
    model: &ReflectionModel,
    pairs: &[TestPair],
    base: &[ExtractorId],
    n_labeled: &[usize],
    cfg: &InferConfig,
    seed: u64,
    replications: usize,
) -> Result<Vec<EvalReport>> {
    let per_pair: Vec<Vec<Vec<ReportRow>>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let methods = method_factors(model, pair, i, base, cfg, seed)?;
            (0..replications)
                .map(|rep| score(pair, &methods, n_labeled, split_seed(seed, i, rep)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = std::iter::once(L2T_METHOD.to_string())
        .chain(base.iter().map(|b| b.token().to_string()))
        .collect();
    Ok((0..replications)
        .map(|rep| {
            let rows = per_pair.iter().flat_map(|p| p[rep].iter().cloned()).collect();
            summarise(rows, &names, n_labeled)
        })
        .collect())
}
