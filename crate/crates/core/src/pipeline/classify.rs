//! Nearest-neighbour evaluation of a factor matrix on a labelled target.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Domain;
use crate::error::{Error, Result};
use crate::factors::FactorMatrix;
use crate::linalg::{select_rows, vstack};

/// Fraction of test rows whose nearest training row (Euclidean, ties to the
/// lower row index) carries the same label.
pub fn nn_accuracy(
    train: &DMatrix<f64>,
    train_labels: &[usize],
    test: &DMatrix<f64>,
    test_labels: &[usize],
) -> Result<f64> {
    if train.nrows() == 0 {
        return Err(Error::invalid("nearest-neighbour classifier needs at least one training row"));
    }
    if test.nrows() == 0 {
        return Err(Error::invalid("no test rows to classify"));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::shape(format!(
            "train rows have {} columns, test rows {}",
            train.ncols(),
            test.ncols()
        )));
    }
    if train_labels.len() != train.nrows() || test_labels.len() != test.nrows() {
        return Err(Error::shape("label count does not match row count"));
    }
    let dim = train.ncols();
    let mut correct = 0usize;
    for i in 0..test.nrows() {
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for j in 0..train.nrows() {
            let mut d = 0.0;
            for c in 0..dim {
                let diff = test[(i, c)] - train[(j, c)];
                d += diff * diff;
            }
            if d < best {
                best = d;
                best_j = j;
            }
        }
        if train_labels[best_j] == test_labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.nrows() as f64)
}

/// Seeded split of `labels` into `n_labeled` training indices and the rest.
///
/// Each class's rows are shuffled, then classes are visited round-robin in
/// label order taking one row at a time, so every class present gets a
/// labelled row once `n_labeled` reaches the class count. Both index lists
/// are returned sorted.
pub fn stratified_split(labels: &[usize], n_labeled: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_labeled >= labels.len() {
        return Err(Error::invalid(format!(
            "{n_labeled} labelled rows requested from a target with {} rows",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut train = Vec::with_capacity(n_labeled);
    let mut depth = 0;
    while train.len() < n_labeled {
        for pool in &pools {
            if train.len() == n_labeled {
                break;
            }
            if let Some(&i) = pool.get(depth) {
                train.push(i);
            }
        }
        depth += 1;
    }
    train.sort_unstable();
    let mut is_train = vec![false; labels.len()];
    for &i in &train {
        is_train[i] = true;
    }
    let test = (0..labels.len()).filter(|&i| !is_train[i]).collect();
    Ok((train, test))
}

/// Whether the labelled source rows join the classifier's training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SourceMode {
    #[default]
    Include,
    /// Only the labelled target rows are used, so with `W = I` the ratio is
    /// exactly one.
    Exclude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioOutcome {
    pub ratio: f64,
    /// Accuracy without transfer (raw features, labelled target rows only).
    pub p_t: f64,
    /// Accuracy with transfer in the embedded space.
    pub p_st: f64,
    pub test_count: usize,
    /// Set when either accuracy was raised to the `1 / test_count` floor.
    pub floored: bool,
}

/// Improvement ratio `p_st / p_t` of the factor matrix `w` on one split of
/// the target. Both accuracies are floored at `1 / test_count`, which keeps
/// the ratio in `(0, test_count]`.
pub fn improvement_ratio(
    source: &Domain,
    target: &Domain,
    w: &FactorMatrix,
    n_labeled: usize,
    seed: u64,
    mode: SourceMode,
) -> Result<RatioOutcome> {
    let t_labels = target.require_labels()?;
    if w.m() != target.dim() || source.dim() != target.dim() {
        return Err(Error::shape(format!(
            "factor matrix has {} rows, domains have {} and {} features",
            w.m(),
            source.dim(),
            target.dim()
        )));
    }
    let (train, test) = stratified_split(t_labels, n_labeled, seed)?;
    let mut present: Vec<usize> = train.iter().map(|&i| t_labels[i]).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::invalid(format!(
            "{n_labeled} labelled target rows cover fewer than two classes"
        )));
    }
    let train_labels: Vec<usize> = train.iter().map(|&i| t_labels[i]).collect();
    let test_labels: Vec<usize> = test.iter().map(|&i| t_labels[i]).collect();

    let xt = target.features();
    let p_t = nn_accuracy(&select_rows(xt, &train), &train_labels, &select_rows(xt, &test), &test_labels)?;

    let zt = target.embed(w);
    let zt_train = select_rows(&zt, &train);
    let zt_test = select_rows(&zt, &test);
    let p_st = match mode {
        SourceMode::Exclude => nn_accuracy(&zt_train, &train_labels, &zt_test, &test_labels)?,
        SourceMode::Include => {
            let s_labels = source.require_labels()?;
            let pool = vstack(&zt_train, &source.embed(w))?;
            let mut pool_labels = train_labels.clone();
            pool_labels.extend_from_slice(s_labels);
            nn_accuracy(&pool, &pool_labels, &zt_test, &test_labels)?
        }
    };

    let floor = 1.0 / test.len() as f64;
    let floored = p_t < floor || p_st < floor;
    let ratio = p_st.max(floor) / p_t.max(floor);
    Ok(RatioOutcome {
        ratio,
        p_t,
        p_st,
        test_count: test.len(),
        floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::joint_pca;
    use crate::pipeline::{gen_pair, SynthConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_match_wins() {
        let train = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 5.0, 5.0, 1.0, 1.0]);
        let acc = nn_accuracy(&train, &[0, 1, 2], &train.rows(1, 1).into_owned(), &[1]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_train_row_predicts_its_label() {
        let train = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let test = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -3.0, 0.5, 9.0, 9.0, 0.0, 0.1]);
        let acc = nn_accuracy(&train, &[2], &test, &[2, 0, 2, 1]).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let train = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let test = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert_eq!(nn_accuracy(&train, &[7, 3], &test, &[7]).unwrap(), 1.0);
    }

    #[test]
    fn empty_train_is_an_error() {
        let test = DMatrix::zeros(1, 2);
        assert!(nn_accuracy(&DMatrix::zeros(0, 2), &[], &test, &[0]).is_err());
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (nt, ne, d) = (rng.random_range(1..15), rng.random_range(1..15), rng.random_range(1..5));
            let train = random_matrix(&mut rng, nt, d);
            let test = random_matrix(&mut rng, ne, d);
            let tl: Vec<usize> = (0..nt).map(|_| rng.random_range(0..3)).collect();
            let el: Vec<usize> = (0..ne).map(|_| rng.random_range(0..3)).collect();
            let mut hits = 0;
            for i in 0..ne {
                let dists: Vec<f64> = (0..nt).map(|j| (test.row(i) - train.row(j)).norm()).collect();
                let j = (0..nt).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
                hits += (tl[j] == el[i]) as usize;
            }
            assert_eq!(nn_accuracy(&train, &tl, &test, &el).unwrap(), hits as f64 / ne as f64);
        }
    }

    #[test]
    fn split_covers_every_class() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (train, test) = stratified_split(&labels, 3, 9).unwrap();
        let mut seen: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(test.len(), 27);
        assert!(stratified_split(&labels, 30, 9).is_err());
    }

    #[test]
    fn identity_without_source_is_exactly_one() {
        let cfg = SynthConfig { m: 8, u_true: 3, samples_per_class: 10, seed: 2, ..Default::default() };
        let (s, t) = gen_pair(&cfg).unwrap();
        for seed in 0..5 {
            let out = improvement_ratio(&s, &t, &FactorMatrix::identity(8), 6, seed, SourceMode::Exclude).unwrap();
            assert_eq!(out.ratio, 1.0);
        }
    }

    #[test]
    fn zero_accuracy_is_floored() {
        // With rows 0 and 1 labelled, each test row sits next to a labelled
        // row of the other class.
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 10.0, 9.0, 1.0]);
        let target = Domain::new(x, Some(vec![0, 1, 0, 1]), "t").unwrap();
        let seed = (0..100)
            .find(|&s| stratified_split(target.labels().unwrap(), 2, s).unwrap().0 == vec![0, 1])
            .unwrap();
        let out = improvement_ratio(&target, &target, &FactorMatrix::identity(1), 2, seed, SourceMode::Exclude).unwrap();
        assert_eq!(out.p_t, 0.0);
        assert_eq!(out.test_count, 2);
        assert!(out.floored);
        assert_eq!(out.ratio, 1.0);
    }

    #[test]
    fn matches_protocol_reexecution() {
        let cfg = SynthConfig { m: 12, u_true: 4, samples_per_class: 12, seed: 31, ..Default::default() };
        let (s, t) = gen_pair(&cfg).unwrap();
        let w = joint_pca(s.features(), t.features(), 4).unwrap();
        let out = improvement_ratio(&s, &t, &w, 6, 77, SourceMode::Include).unwrap();

        let tl = t.labels().unwrap();
        let (train, test) = stratified_split(tl, 6, 77).unwrap();
        let predict = |pool: &[(Vec<f64>, usize)], q: &[f64]| {
            let mut best = (f64::INFINITY, 0);
            for (row, label) in pool {
                let d: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, *label);
                }
            }
            best.1
        };
        let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
        let raw_pool: Vec<_> = train.iter().map(|&i| (row(t.features(), i), tl[i])).collect();
        let zt = t.features() * w.as_matrix();
        let zs = s.features() * w.as_matrix();
        let mut emb_pool: Vec<_> = train.iter().map(|&i| (row(&zt, i), tl[i])).collect();
        emb_pool.extend((0..s.rows()).map(|i| (row(&zs, i), s.labels().unwrap()[i])));
        let acc = |pool: &[(Vec<f64>, usize)], m: &DMatrix<f64>| {
            test.iter().filter(|&&i| predict(pool, &row(m, i)) == tl[i]).count() as f64 / test.len() as f64
        };
        let (pt, pst) = (acc(&raw_pool, t.features()), acc(&emb_pool, &zt));
        let floor = 1.0 / test.len() as f64;
        assert_eq!(out.p_t, pt);
        assert_eq!(out.p_st, pst);
        assert_eq!(out.ratio, pst.max(floor) / pt.max(floor));
    }

    proptest! {
        #[test]
        fn ratio_within_bounds(seed in 0u64..500, n_labeled in 3usize..20) {
            let cfg = SynthConfig { m: 10, u_true: 3, samples_per_class: 8, seed, ..Default::default() };
            let (s, t) = gen_pair(&cfg).unwrap();
            let w = joint_pca(s.features(), t.features(), 3).unwrap();
            let out = improvement_ratio(&s, &t, &w, n_labeled, seed, SourceMode::Include).unwrap();
            prop_assert!(out.ratio > 0.0);
            prop_assert!(out.ratio <= out.test_count as f64);
        }
    }
}
