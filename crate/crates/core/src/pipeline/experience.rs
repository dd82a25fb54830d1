//! Recording transfer experiences: a domain pair, the factor matrix one base
//! extractor produced for it, and the improvement ratio that matrix achieved.

use rayon::prelude::*;

use super::classify::{improvement_ratio, SourceMode};
use super::synth::{gen_pair, SynthConfig};
use super::Domain;
use crate::error::{Error, Result};
use crate::factors::{ExtractorId, FactorMatrix};
use crate::kernels::default_exponents;
use crate::stats::{featurize, ExperienceFeatures};

/// Child seed `index` of `seed` (SplitMix64 finaliser over a mixed input).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const PAIR_STREAM: u64 = 0;
const EXTRACTOR_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const PAIRING_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub source: Domain,
    pub target: Domain,
    pub extractor: ExtractorId,
    pub w: FactorMatrix,
    pub n_labeled: usize,
    pub ratio: f64,
    /// Seed every random choice of this experience derives from.
    pub seed: u64,
    /// Whether an accuracy hit the `1 / test_count` floor.
    pub floored: bool,
}

impl Experience {
    /// Builds one experience from an existing pair.
    pub fn record(
        source: Domain,
        target: Domain,
        extractor: ExtractorId,
        u: usize,
        n_labeled: usize,
        seed: u64,
    ) -> Result<Self> {
        let w = extractor.extract(
            source.features(),
            target.features(),
            u,
            derive_seed(seed, EXTRACTOR_STREAM),
        )?;
        let out = improvement_ratio(
            &source,
            &target,
            &w,
            n_labeled,
            derive_seed(seed, SPLIT_STREAM),
            SourceMode::Include,
        )?;
        Ok(Self {
            source,
            target,
            extractor,
            w,
            n_labeled,
            ratio: out.ratio,
            seed,
            floored: out.floored,
        })
    }

    pub fn featurize(&self, r: usize) -> Result<ExperienceFeatures> {
        featurize(
            &self.source,
            &self.target,
            &self.w,
            self.ratio,
            self.n_labeled,
            r,
            derive_seed(self.seed, PAIRING_STREAM),
        )
    }
}

/// An ordered collection of experiences plus the settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceStore {
    pub experiences: Vec<Experience>,
    pub extractors: Vec<ExtractorId>,
    pub synth: SynthConfig,
    pub n_labeled_choices: Vec<usize>,
    pub seed: u64,
    /// Bandwidth exponents shared by every featurised experience.
    pub exponents: Vec<f64>,
}

impl ExperienceStore {
    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    /// Latent dimension of every stored factor matrix.
    pub fn u(&self) -> usize {
        self.synth.u_true
    }

    pub fn m(&self) -> usize {
        self.synth.m
    }

    /// Featurises every experience in parallel, in store order.
    pub fn featurize_all(&self, r: usize) -> Result<Vec<ExperienceFeatures>> {
        self.experiences.par_iter().map(|e| e.featurize(r)).collect()
    }
}

/// Generates `n` experiences. Experience `e` draws its pair from child seed
/// `e`, uses extractor `e mod |extractors|` and labelled count
/// `n_labeled_choices[e mod |choices|]`. Work runs in parallel but the store
/// is assembled in index order.
pub fn generate_experiences(
    n: usize,
    extractors: &[ExtractorId],
    synth: &SynthConfig,
    n_labeled_choices: &[usize],
    seed: u64,
) -> Result<ExperienceStore> {
    if extractors.is_empty() {
        return Err(Error::invalid("at least one base extractor is required"));
    }
    if n_labeled_choices.is_empty() {
        return Err(Error::invalid("at least one labelled-count choice is required"));
    }
    synth.validate()?;
    let experiences = (0..n)
        .into_par_iter()
        .map(|e| {
            let child = derive_seed(seed, e as u64);
            let (source, target) = gen_pair(&synth.with_seed(derive_seed(child, PAIR_STREAM)))?;
            Experience::record(
                source,
                target,
                extractors[e % extractors.len()],
                synth.u_true,
                n_labeled_choices[e % n_labeled_choices.len()],
                child,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperienceStore {
        experiences,
        extractors: extractors.to_vec(),
        synth: synth.clone(),
        n_labeled_choices: n_labeled_choices.to_vec(),
        seed,
        exponents: default_exponents(),
    })
}
