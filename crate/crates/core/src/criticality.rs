//! Modality criticality and decremental removal paths.
//!
//! The criticality of a modality inside a combination is the negated sum of
//! its feature cosine similarities to the other members: a modality that looks
//! like nobody else is hard to replace. A path starts from a combination and
//! removes one modality per step until a single one remains.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcsdError, Result};
use crate::lattice::ModalityCombo;
use crate::tensor::{Scalar, Tensor};

/// Norm below which a feature vector counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Global spatial average per channel, also averaged over the batch.
pub fn pooled_feature<T: Scalar>(map: &Tensor<T>) -> Result<Vec<f64>> {
    if map.is_empty() {
        return Err(CcsdError::invalid("cannot pool an empty feature map"));
    }
    let [nb, nc, ..] = map.shape();
    let denom = (nb * map.spatial()) as f64;
    Ok((0..nc)
        .map(|c| {
            (0..nb)
                .map(|b| map.plane(b, c).iter().map(|v| v.f64()).sum::<f64>())
                .sum::<f64>()
                / denom
        })
        .collect())
}

/// Cosine similarity; zero (with a warning) when either vector is degenerate.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CcsdError::ShapeMismatch {
            expected: vec![u.len()],
            actual: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        log::warn!("degenerate feature vector in cosine similarity (dead encoder?)");
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Symmetric pairwise similarity between modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wraps a row-major `n x n` matrix; rejects asymmetric or out-of-range input.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(CcsdError::ShapeMismatch {
                expected: vec![n, n],
                actual: vec![values.len()],
            });
        }
        for j in 0..n {
            for z in 0..n {
                let v = values[j * n + z];
                if j != z && (v.abs() > 1.0 + 1e-9 || (v - values[z * n + j]).abs() > 1e-12) {
                    return Err(CcsdError::invalid(format!(
                        "similarity[{j}][{z}] = {v} breaks symmetry or range"
                    )));
                }
            }
        }
        Ok(Self { n, values })
    }

    /// Pairwise cosine similarities of per-modality feature vectors.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let mut values = vec![1.0; n * n];
        for j in 0..n {
            for z in j + 1..n {
                let s = cosine_similarity(&features[j], &features[z])?;
                values[j * n + z] = s;
                values[z * n + j] = s;
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, z: usize) -> f64 {
        self.values[j * self.n + z]
    }
}

/// Criticality per member of a combination, ascending modality index.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityScores {
    scores: Vec<(usize, f64)>,
}

impl CriticalityScores {
    pub fn new(scores: Vec<(usize, f64)>) -> Self {
        let mut scores = scores;
        scores.sort_by_key(|&(m, _)| m);
        Self { scores }
    }

    pub fn get(&self, modality: usize) -> Option<f64> {
        self.scores.iter().find(|&&(m, _)| m == modality).map(|&(_, s)| s)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.scores.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `s(m_j) = -sum_{z != j, z in combo} sim(j, z)` for each member `j`.
pub fn criticality_scores(sim: &SimilarityMatrix, combo: ModalityCombo) -> Result<CriticalityScores> {
    if combo.min_modalities() > sim.n() {
        return Err(CcsdError::invalid(format!(
            "combination {combo} exceeds the {}x{} similarity matrix",
            sim.n(),
            sim.n()
        )));
    }
    let members: Vec<usize> = combo.members().collect();
    Ok(CriticalityScores::new(
        members
            .iter()
            .map(|&j| {
                let s: f64 = members.iter().filter(|&&z| z != j).map(|&z| sim.get(j, z)).sum();
                (j, -s)
            })
            .collect(),
    ))
}

fn pick(scores: &CriticalityScores, better: impl Fn(f64, f64) -> bool) -> Result<usize> {
    if scores.len() < 2 {
        return Err(CcsdError::invalid(
            "removal needs a combination of at least two modalities",
        ));
    }
    let mut it = scores.iter();
    let (mut best, mut best_s) = it.next().expect("non-empty");
    for (m, s) in it {
        if better(s, best_s) {
            best = m;
            best_s = s;
        }
    }
    Ok(best)
}

/// Most critical member; ties resolve to the lowest index.
pub fn select_removal(scores: &CriticalityScores) -> Result<usize> {
    pick(scores, |a, b| a > b)
}

/// Least critical member; ties resolve to the lowest index.
pub fn select_min_removal(scores: &CriticalityScores) -> Result<usize> {
    pick(scores, |a, b| a < b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStrategy {
    MaxCriticality,
    MinCriticality,
    Random,
}

impl PathStrategy {
    pub const ALL: [PathStrategy; 3] = [
        PathStrategy::MaxCriticality,
        PathStrategy::MinCriticality,
        PathStrategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PathStrategy::MaxCriticality => "max_criticality",
            PathStrategy::MinCriticality => "min_criticality",
            PathStrategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                CcsdError::invalid(format!(
                    "unknown path strategy {s:?} (expected max_criticality, min_criticality or random)"
                ))
            })
    }
}

/// Chain of combinations, each one modality smaller than the previous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecrementPath {
    pub steps: Vec<ModalityCombo>,
    pub strategy: PathStrategy,
}

impl DecrementPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Removed modality at each transition.
    pub fn removals(&self) -> Vec<usize> {
        self.steps
            .windows(2)
            .map(|w| (w[0].bits() & !w[1].bits()).trailing_zeros() as usize)
            .collect()
    }
}

/// Arrow-joined labels, e.g. `1234->134->34->4`.
impl fmt::Display for DecrementPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("->")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Builds a decrement path from `start`. `features[j]` is the pooled feature of
/// modality `j`; similarities are recomputed among the survivors at every step.
pub fn build_path<R: Rng>(
    start: ModalityCombo,
    features: &[Vec<f64>],
    strategy: PathStrategy,
    rng: &mut R,
) -> Result<DecrementPath> {
    if start.min_modalities() > features.len() {
        return Err(CcsdError::invalid(format!(
            "start {start} needs features for {} modalities, got {}",
            start.min_modalities(),
            features.len()
        )));
    }
    let mut steps = vec![start];
    let mut current = start;
    while current.size() > 1 {
        let members: Vec<usize> = current.members().collect();
        let removed = match strategy {
            PathStrategy::Random => members[rng.random_range(0..members.len())],
            _ => {
                let local: Vec<Vec<f64>> = members.iter().map(|&m| features[m].clone()).collect();
                let sim = SimilarityMatrix::from_features(&local)?;
                let local_scores = criticality_scores(&sim, ModalityCombo::full(members.len())?)?;
                let scores = CriticalityScores::new(
                    local_scores.iter().map(|(i, s)| (members[i], s)).collect(),
                );
                if strategy == PathStrategy::MaxCriticality {
                    select_removal(&scores)?
                } else {
                    select_min_removal(&scores)?
                }
            }
        };
        current = current.remove(removed)?;
        steps.push(current);
    }
    Ok(DecrementPath { steps, strategy })
}

/// [`build_path`] with a generator seeded from `seed`.
pub fn build_path_seeded(
    start: ModalityCombo,
    features: &[Vec<f64>],
    strategy: PathStrategy,
    seed: u64,
) -> Result<DecrementPath> {
    build_path(start, features, strategy, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::enumerate_combos;
    use proptest::prelude::*;

    fn combo(s: &str) -> ModalityCombo {
        s.parse().unwrap()
    }

    fn uniform_sim(n: usize, v: f64) -> SimilarityMatrix {
        let values = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { v }).collect();
        SimilarityMatrix::new(n, values).unwrap()
    }

    /// Features with m1 orthogonal to m2 = m3.
    fn orthogonal_m1() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]
    }

    #[test]
    fn pooling() {
        let t = Tensor::<f64>::full([2, 3, 1, 2, 2], 0.75);
        assert_eq!(pooled_feature(&t).unwrap(), vec![0.75; 3]);
        let t = Tensor::from_vec([1, 2, 1, 1, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        assert_eq!(pooled_feature(&t).unwrap(), vec![2.0, 2.0]);
        let a = Tensor::from_vec([1, 2, 1, 1, 2], vec![1.0, 2.0, -4.0, 0.5]).unwrap();
        let b = Tensor::from_vec([1, 2, 1, 1, 2], vec![0.25, 3.0, 1.0, 1.5]).unwrap();
        let sum = Tensor::from_vec([1, 2, 1, 1, 2], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let (pa, pb, ps) = (pooled_feature(&a).unwrap(), pooled_feature(&b).unwrap(), pooled_feature(&sum).unwrap());
        for c in 0..2 {
            assert!((ps[c] - pa[c] - pb[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn score_examples() {
        let s = criticality_scores(&uniform_sim(3, 1.0), combo("123")).unwrap();
        assert!(s.iter().all(|(_, v)| v == -2.0));
        assert_eq!(select_removal(&s).unwrap(), 0);
        let s = criticality_scores(&uniform_sim(2, 0.5), combo("12")).unwrap();
        assert!(s.iter().all(|(_, v)| v == -0.5));
        let same = SimilarityMatrix::from_features(&vec![vec![1.0, 2.0]; 4]).unwrap();
        let s = criticality_scores(&same, combo("1234")).unwrap();
        let first = s.get(0).unwrap();
        assert!(s.iter().all(|(_, v)| (v - first).abs() < 1e-12));
        let single = criticality_scores(&same, combo("3")).unwrap();
        assert_eq!(single.get(2), Some(0.0));
    }

    #[test]
    fn selection_examples() {
        let s = CriticalityScores::new(vec![(0, -0.1), (1, -0.5), (2, -0.3)]);
        assert_eq!(select_removal(&s).unwrap(), 0);
        assert_eq!(select_min_removal(&s).unwrap(), 1);
        let tie = CriticalityScores::new(vec![(3, 0.2), (1, 0.2), (2, 0.2)]);
        assert_eq!(select_removal(&tie).unwrap(), 1);
        assert!(select_removal(&CriticalityScores::new(vec![(0, 1.0)])).is_err());
    }

    #[test]
    fn hand_paths() {
        let f = orthogonal_m1();
        let sim = SimilarityMatrix::from_features(&f).unwrap();
        let s = criticality_scores(&sim, combo("123")).unwrap();
        assert_eq!((s.get(0), s.get(1), s.get(2)), (Some(0.0), Some(-1.0), Some(-1.0)));
        let max = build_path_seeded(combo("123"), &f, PathStrategy::MaxCriticality, 0).unwrap();
        assert_eq!(max.to_string(), "123->23->3");
        let min = build_path_seeded(combo("123"), &f, PathStrategy::MinCriticality, 0).unwrap();
        assert_eq!(min.to_string(), "123->13->3");
        assert_eq!(min.removals(), vec![1, 0]);
    }

    #[test]
    fn random_path_is_seed_deterministic() {
        let f = vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![0.5, 0.5], vec![-1.0, 0.3]];
        let a = build_path_seeded(combo("1234"), &f, PathStrategy::Random, 42).unwrap();
        let b = build_path_seeded(combo("1234"), &f, PathStrategy::Random, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_path() {
        let p = build_path_seeded(combo("2"), &[vec![1.0], vec![1.0]], PathStrategy::MaxCriticality, 0).unwrap();
        assert_eq!(p.steps, vec![combo("2")]);
        assert_eq!(p.to_string(), "2");
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(SimilarityMatrix::new(2, vec![1.0, 0.3, 0.2, 1.0]).is_err());
        assert!(SimilarityMatrix::new(2, vec![1.0, 1.5, 1.5, 1.0]).is_err());
        assert!(SimilarityMatrix::new(2, vec![1.0]).is_err());
    }

    fn features_strategy(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), n)
    }

    proptest! {
        #[test]
        fn paths_are_lattice_chains(f in features_strategy(5), seed in 0u64..1000, s in 0usize..3) {
            let strategy = PathStrategy::ALL[s];
            for &start in enumerate_combos(5).unwrap().iter() {
                let p = build_path_seeded(start, &f, strategy, seed).unwrap();
                prop_assert_eq!(p.len(), start.size());
                prop_assert_eq!(p.steps.last().unwrap().size(), 1);
                for w in p.steps.windows(2) {
                    prop_assert_eq!(w[1].size() + 1, w[0].size());
                    prop_assert!(w[1].is_subset_of(w[0]));
                }
                let mut removed = p.removals();
                removed.push(p.steps.last().unwrap().members().next().unwrap());
                removed.sort();
                prop_assert_eq!(removed, start.members().collect::<Vec<_>>());
            }
        }

        #[test]
        fn selection_is_scale_invariant(f in features_strategy(4), scale in 0.01f64..100.0) {
            let scaled: Vec<Vec<f64>> = f.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let full = combo("1234");
            for strategy in [PathStrategy::MaxCriticality, PathStrategy::MinCriticality] {
                let a = build_path_seeded(full, &f, strategy, 0).unwrap();
                let b = build_path_seeded(full, &scaled, strategy, 0).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn recomputation_equals_masking(f in features_strategy(4)) {
            // scores among survivors from a freshly built matrix equal the
            // full matrix restricted to the surviving rows and columns
            let full = SimilarityMatrix::from_features(&f).unwrap();
            for &c in enumerate_combos(4).unwrap().iter() {
                let members: Vec<usize> = c.members().collect();
                let local: Vec<Vec<f64>> = members.iter().map(|&m| f[m].clone()).collect();
                let local_sim = SimilarityMatrix::from_features(&local).unwrap();
                let local_scores = criticality_scores(&local_sim, ModalityCombo::full(members.len()).unwrap()).unwrap();
                let masked = criticality_scores(&full, c).unwrap();
                for (i, s) in local_scores.iter() {
                    prop_assert!((masked.get(members[i]).unwrap() - s).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn max_and_min_differ_without_ties(f in features_strategy(4)) {
            let sim = SimilarityMatrix::from_features(&f).unwrap();
            let scores = criticality_scores(&sim, combo("1234")).unwrap();
            let vals: Vec<f64> = scores.iter().map(|(_, s)| s).collect();
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-9);
            prop_assert_ne!(select_removal(&scores).unwrap(), select_min_removal(&scores).unwrap());
        }
    }
}
