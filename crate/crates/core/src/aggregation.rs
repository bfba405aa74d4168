//! Combining labelings from many seeds, and picking reliable per-class
//! samples from the consensus.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embeddings::normalize_rows_in_place;
use crate::error::{Error, Result};
use crate::evaluation::best_mapping;
use crate::meta_opt::{RunRecord, RunResult};

/// The parts of a run that aggregation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledRun {
    pub seed: u64,
    pub cv_accuracy: f64,
    pub labels: Vec<usize>,
}

impl From<&RunResult> for LabeledRun {
    fn from(r: &RunResult) -> Self {
        Self { seed: r.seed, cv_accuracy: r.cv_accuracy, labels: r.labeling.hard.clone() }
    }
}

impl From<&RunRecord> for LabeledRun {
    fn from(r: &RunRecord) -> Self {
        Self { seed: r.seed, cv_accuracy: r.cv_accuracy, labels: r.labels.clone() }
    }
}

/// Runs relabeled into the frame of the reference (best cv accuracy) run.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedRuns {
    pub k: usize,
    pub reference_seed: u64,
    /// In input order.
    pub runs: Vec<LabeledRun>,
}

/// Higher cv accuracy first, lower seed on ties.
fn rank_order(a: &LabeledRun, b: &LabeledRun) -> Ordering {
    b.cv_accuracy.total_cmp(&a.cv_accuracy).then(a.seed.cmp(&b.seed))
}

/// Hungarian-matches every run onto the highest-cv-accuracy run.
pub fn align_labelings(runs: &[LabeledRun], k: usize) -> Result<AlignedRuns> {
    let first = runs.first().ok_or_else(|| Error::Input("no runs to align".into()))?;
    let n = first.labels.len();
    for r in runs {
        if r.labels.len() != n {
            return Err(Error::Input(format!("run {} has {} labels, expected {n}", r.seed, r.labels.len())));
        }
        if let Some(&bad) = r.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("run {} has label {bad} but K={k}", r.seed)));
        }
    }
    let reference = runs.iter().min_by(|a, b| rank_order(a, b)).expect("non-empty");
    let aligned = runs
        .iter()
        .map(|r| {
            let perm = best_mapping(&r.labels, &reference.labels, k)?;
            Ok(LabeledRun { labels: r.labels.iter().map(|&l| perm[l]).collect(), ..r.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignedRuns { k, reference_seed: reference.seed, runs: aligned })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateResult {
    pub consensus: Vec<usize>,
    /// `N x K` vote counts.
    pub per_sample_votes: Array2<u32>,
    pub reference_seed: u64,
    /// Seeds that took part in the vote, best first.
    pub voters: Vec<u64>,
}

/// Per-sample majority over the aligned runs, optionally restricted to the
/// `top_n` runs by cv accuracy. Ties go to the reference run's label if it is
/// among the tied classes, else to the lowest tied class index.
pub fn majority_vote(aligned: &AlignedRuns, top_n: Option<usize>) -> Result<AggregateResult> {
    let mut ranked: Vec<&LabeledRun> = aligned.runs.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    if let Some(top) = top_n {
        if top == 0 {
            return Err(Error::Config("top_n must be positive".into()));
        }
        ranked.truncate(top);
    }
    let reference =
        aligned.runs.iter().find(|r| r.seed == aligned.reference_seed).expect("reference is one of the runs");
    let n = reference.labels.len();
    let mut votes = Array2::<u32>::zeros((n, aligned.k));
    for run in &ranked {
        for (i, &l) in run.labels.iter().enumerate() {
            votes[[i, l]] += 1;
        }
    }
    let consensus = votes
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let max = *row.iter().max().expect("K >= 1");
            let preferred = reference.labels[i];
            if row[preferred] == max {
                preferred
            } else {
                row.iter().position(|&v| v == max).expect("max exists")
            }
        })
        .collect();
    Ok(AggregateResult {
        consensus,
        per_sample_votes: votes,
        reference_seed: aligned.reference_seed,
        voters: ranked.iter().map(|r| r.seed).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliableClass {
    pub class: usize,
    pub indices: Vec<usize>,
    pub a_nn: Vec<usize>,
    pub a_tau: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliableSet {
    pub n_k: usize,
    pub n_neigh: usize,
    pub classes: Vec<ReliableClass>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ReliableSet {
    pub fn all_indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.classes.iter().flat_map(|c| c.indices.iter().map(move |&i| (i, c.class)))
    }
}

/// Indices of the `count` most cosine-similar rows to each row, self
/// excluded; equal similarities resolve to the lower index.
pub fn cosine_neighbors(phi: ArrayView2<'_, f64>, count: usize) -> Result<Vec<Vec<usize>>> {
    let n = phi.nrows();
    if count >= n {
        return Err(Error::Config(format!("need fewer than N={n} neighbors, got {count}")));
    }
    let mut unit = phi.to_owned();
    normalize_rows_in_place(&mut unit)?;
    let mut out = Vec::with_capacity(n);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    let by_similarity = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    for i in 0..n {
        let sims = unit.dot(&unit.row(i));
        candidates.clear();
        candidates.extend(sims.iter().enumerate().filter(|(j, _)| *j != i).map(|(j, &s)| (s, j)));
        if count > 0 && count < candidates.len() {
            candidates.select_nth_unstable_by(count - 1, by_similarity);
        }
        candidates.truncate(count);
        candidates.sort_by(by_similarity);
        out.push(candidates.iter().map(|c| c.1).collect());
    }
    Ok(out)
}

/// Balanced reliable samples: majority label, agreement with the runs
/// (`a_tau`), agreement with `n_neigh` cosine neighbours in `phi1` (`a_nn`);
/// per class the top `n_k` by `(a_nn, a_tau)` descending, ties by index.
pub fn select_reliable(
    aligned: &AlignedRuns,
    phi1: ArrayView2<'_, f64>,
    n_k: usize,
    n_neigh: usize,
) -> Result<ReliableSet> {
    let vote = majority_vote(aligned, None)?;
    let majority = &vote.consensus;
    let n = majority.len();
    if phi1.nrows() != n {
        return Err(Error::Input(format!("phi1 has {} rows, labelings have {n}", phi1.nrows())));
    }
    let a_tau: Vec<usize> = (0..n).map(|i| vote.per_sample_votes[[i, majority[i]]] as usize).collect();
    let neighbors = cosine_neighbors(phi1, n_neigh)?;
    let a_nn: Vec<usize> = neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| nb.iter().filter(|&&j| majority[j] == majority[i]).count())
        .collect();

    let mut classes = Vec::with_capacity(aligned.k);
    let mut warnings = Vec::new();
    for class in 0..aligned.k {
        let mut members: Vec<usize> = (0..n).filter(|&i| majority[i] == class).collect();
        members.sort_by(|&a, &b| (a_nn[b], a_tau[b]).cmp(&(a_nn[a], a_tau[a])).then(a.cmp(&b)));
        if members.len() < n_k {
            let msg = format!("class {class} has {} members, fewer than the {n_k} requested", members.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        members.truncate(n_k);
        classes.push(ReliableClass {
            class,
            a_nn: members.iter().map(|&i| a_nn[i]).collect(),
            a_tau: members.iter().map(|&i| a_tau[i]).collect(),
            indices: members,
        });
    }
    Ok(ReliableSet { n_k, n_neigh, classes, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn run(seed: u64, cv: f64, labels: &[usize]) -> LabeledRun {
        LabeledRun { seed, cv_accuracy: cv, labels: labels.to_vec() }
    }

    #[test]
    fn single_run_unchanged() {
        let r = run(3, 0.5, &[2, 0, 1, 1]);
        let aligned = align_labelings(std::slice::from_ref(&r), 3).unwrap();
        assert_eq!(aligned.runs, vec![r]);
        assert_eq!(aligned.reference_seed, 3);
    }

    #[test]
    fn permuted_copy_aligns_exactly() {
        let base = [0, 1, 2, 2, 1, 0, 0];
        let permuted: Vec<usize> = base.iter().map(|&l| [2, 0, 1][l]).collect();
        let aligned = align_labelings(&[run(0, 0.9, &base), run(1, 0.8, &permuted)], 3).unwrap();
        assert_eq!(aligned.runs[1].labels, base);
    }

    #[test]
    fn planted_permutations_recovered() {
        let base: Vec<usize> = (0..30).map(|i| i % 4).collect();
        let perms = [[1, 2, 3, 0], [3, 2, 1, 0], [0, 1, 3, 2]];
        let mut runs = vec![run(10, 0.99, &base)];
        for (s, p) in perms.iter().enumerate() {
            let mut labels: Vec<usize> = base.iter().map(|&l| p[l]).collect();
            // one disagreement each so alignment is not trivially exact
            labels[s] = p[(base[s] + 1) % 4];
            runs.push(run(s as u64, 0.5, &labels));
        }
        let aligned = align_labelings(&runs, 4).unwrap();
        assert_eq!(aligned.reference_seed, 10);
        for (s, r) in aligned.runs.iter().skip(1).enumerate() {
            let disagreements = r.labels.iter().zip(&base).filter(|(a, b)| a != b).count();
            assert_eq!(disagreements, 1, "run {s}");
        }
    }

    #[test]
    fn reference_tie_goes_to_lower_seed() {
        let aligned = align_labelings(&[run(5, 0.7, &[0, 1]), run(2, 0.7, &[1, 0])], 2).unwrap();
        assert_eq!(aligned.reference_seed, 2);
    }

    #[test]
    fn inconsistent_runs_rejected() {
        assert!(align_labelings(&[run(0, 0.1, &[0, 1]), run(1, 0.1, &[0])], 2).is_err());
        assert!(align_labelings(&[run(0, 0.1, &[0, 3])], 2).is_err());
        assert!(align_labelings(&[], 2).is_err());
    }

    #[test]
    fn vote_examples() {
        let same = [0, 1, 1, 0];
        let aligned = align_labelings(&[run(0, 0.5, &same), run(1, 0.4, &same)], 2).unwrap();
        assert_eq!(majority_vote(&aligned, None).unwrap().consensus, same);

        let aligned = AlignedRuns {
            k: 2,
            reference_seed: 0,
            runs: vec![run(0, 0.9, &[1, 1]), run(1, 0.5, &[0, 0]), run(2, 0.4, &[0, 1])],
        };
        let vote = majority_vote(&aligned, None).unwrap();
        assert_eq!(vote.consensus, vec![0, 1]);
        assert_eq!(vote.per_sample_votes, array![[2, 1], [1, 2]]);
        assert_eq!(majority_vote(&aligned, Some(1)).unwrap().consensus, vec![1, 1]);
        // top two: {1, 0} ties on sample 0 and goes to the reference
        assert_eq!(majority_vote(&aligned, Some(2)).unwrap().consensus, vec![1, 1]);
    }

    #[test]
    fn neighbors_exclude_self_and_break_ties_by_index() {
        let phi = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let nb = cosine_neighbors(phi.view(), 2).unwrap();
        assert_eq!(nb[0], vec![1, 2]);
        assert_eq!(nb[2], vec![0, 1]);
        assert_eq!(nb[3], vec![0, 1]);
        assert!(cosine_neighbors(phi.view(), 4).is_err());
    }

    #[test]
    fn lexicographic_order_prefers_neighbor_agreement() {
        // sample 2 is filed under class 0 by every run but sits among class 1
        let phi = array![[1.0, 0.0], [1.0, 0.01], [-1.0, 0.03], [-1.0, 0.0], [-1.0, 0.1], [1.0, 0.02]];
        let aligned = AlignedRuns {
            k: 2,
            reference_seed: 0,
            runs: vec![
                run(0, 0.9, &[0, 0, 0, 1, 1, 0]),
                run(1, 0.8, &[0, 0, 0, 1, 1, 0]),
                run(2, 0.7, &[0, 1, 0, 1, 1, 0]),
            ],
        };
        let set = select_reliable(&aligned, phi.view(), 4, 2).unwrap();
        let c0 = &set.classes[0];
        assert_eq!(c0.indices, vec![0, 5, 1, 2]);
        assert_eq!(c0.a_nn, vec![2, 2, 2, 0]);
        assert_eq!(c0.a_tau, vec![3, 3, 2, 3]);
    }

    #[test]
    fn short_class_yields_warning() {
        let phi = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]];
        let aligned = align_labelings(&[run(0, 0.5, &[0, 0, 1])], 2).unwrap();
        let set = select_reliable(&aligned, phi.view(), 2, 1).unwrap();
        assert_eq!(set.classes[1].indices, vec![2]);
        assert_eq!(set.warnings.len(), 1);
    }

    #[test]
    fn unanimous_clean_blobs_saturate() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..12 {
            let c = i % 3;
            let mut v = [0.0; 3];
            v[c] = 1.0;
            v[(c + 1) % 3] = 0.01 * (i / 3) as f64;
            rows.extend_from_slice(&v);
            labels.push(c);
        }
        let phi = Array2::from_shape_vec((12, 3), rows).unwrap();
        let runs: Vec<LabeledRun> = (0..4).map(|s| run(s, 0.9, &labels)).collect();
        let aligned = align_labelings(&runs, 3).unwrap();
        let set = select_reliable(&aligned, phi.view(), 2, 3).unwrap();
        for c in &set.classes {
            assert!(c.a_tau.iter().all(|&a| a == 4));
            assert!(c.a_nn.iter().all(|&a| a == 3));
        }
    }

    proptest! {
        #[test]
        fn vote_invariant_to_global_relabeling(
            base in prop::collection::vec(0usize..3, 9),
            perms in prop::collection::vec(0usize..6, 1..6),
            shift in 1usize..3,
        ) {
            const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let mut base = base;
            base.extend([0, 1, 2]);
            let runs: Vec<LabeledRun> = perms.iter().enumerate()
                .map(|(s, &p)| {
                    let labels: Vec<usize> = base.iter().map(|&l| PERMS[p][l]).collect();
                    run(s as u64, 1.0 - s as f64 * 0.1, &labels)
                })
                .collect();
            let relabeled: Vec<LabeledRun> = runs.iter()
                .map(|r| LabeledRun { labels: r.labels.iter().map(|l| (l + shift) % 3).collect(), ..r.clone() })
                .collect();
            let a = majority_vote(&align_labelings(&runs, 3).unwrap(), None).unwrap();
            let b = majority_vote(&align_labelings(&relabeled, 3).unwrap(), None).unwrap();
            let mapped: Vec<usize> = a.consensus.iter().map(|l| (l + shift) % 3).collect();
            prop_assert_eq!(&mapped, &b.consensus);
            prop_assert_eq!(&a.consensus, &runs[0].labels);
        }

        #[test]
        fn reliable_indices_carry_majority_label(
            raw in prop::collection::vec(prop::collection::vec(0usize..3, 10), 1..4),
            seed in 0u64..50,
        ) {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let phi = Array2::from_shape_simple_fn((10, 3), || StandardNormal.sample(&mut rng));
            let runs: Vec<LabeledRun> = raw.iter().enumerate()
                .map(|(s, l)| run(s as u64, 0.5, l)).collect();
            let aligned = align_labelings(&runs, 3).unwrap();
            let consensus = majority_vote(&aligned, None).unwrap().consensus;
            let set = select_reliable(&aligned, phi.view(), 3, 4).unwrap();
            let mut seen = std::collections::HashSet::new();
            for (i, class) in set.all_indices() {
                prop_assert_eq!(consensus[i], class);
                prop_assert!(seen.insert(i));
            }
        }
    }
}
