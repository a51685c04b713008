use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::IGNORE_INDEX;
use crate::pipeline::TokenizedSample;

/// 0-based rank of `truth` when classes are sorted by descending score,
/// ties going to the lower class id.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < truth))
        .count()
}

/// Class ids in ranked order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Fraction of positions whose true class ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Contract("recall over an empty set of positions".into()));
    }
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// Ranks of the true intent at every supervised position of `samples`.
pub fn supervised_ranks(model: &Model, samples: &[TokenizedSample]) -> Result<Vec<usize>> {
    let mut ranks = Vec::new();
    for s in samples {
        let targets = s.targets();
        if targets.iter().all(|&t| t == IGNORE_INDEX) {
            continue;
        }
        let logits = model.predict_logits(s)?;
        for (i, &t) in targets.iter().enumerate() {
            if t != IGNORE_INDEX {
                ranks.push(rank_of(logits.row(i), t));
            }
        }
    }
    Ok(ranks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub ks: Vec<usize>,
    pub values: Vec<f64>,
    pub positions: usize,
}

impl Recalls {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Recalls> {
        Ok(Recalls {
            ks: ks.to_vec(),
            values: ks.iter().map(|&k| recall_at_k(ranks, k)).collect::<Result<_>>()?,
            positions: ranks.len(),
        })
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.values[i])
    }
}

pub fn evaluate(model: &Model, samples: &[TokenizedSample], ks: &[usize]) -> Result<Recalls> {
    Recalls::from_ranks(&supervised_ranks(model, samples)?, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn examples() {
        let scores = [0.1, 0.9, 0.5, 0.3];
        assert_eq!(rank_of(&scores, 1), 0);
        assert_eq!(recall_at_k(&[rank_of(&scores, 1)], 1).unwrap(), 1.0);
        // class 3 ranks third
        let r = rank_of(&scores, 3);
        assert_eq!(r, 2);
        assert_eq!(recall_at_k(&[r], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[r], 5).unwrap(), 1.0);
        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&[0], 0).is_err());
    }

    #[test]
    fn ties_go_to_lower_id() {
        assert_eq!(ranking(&[1.0, 2.0, 2.0, 0.0]), vec![1, 2, 0, 3]);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 2);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 0);
    }

    #[test]
    fn random_scores_are_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ranks: Vec<usize> = (0..10_000)
            .map(|_| {
                let s: Vec<f64> = (0..20).map(|_| rng.gen()).collect();
                rank_of(&s, rng.gen_range(0..20))
            })
            .collect();
        let r = recall_at_k(&ranks, 1).unwrap();
        assert!((r - 0.05).abs() < 0.01, "{r}");
    }

    proptest! {
        #[test]
        fn rank_matches_sorted_position(scores in prop::collection::vec(0i32..5, 1..12), t in 0usize..12) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let t = t % scores.len();
            let pos = ranking(&scores).iter().position(|&c| c == t).unwrap();
            prop_assert_eq!(rank_of(&scores, t), pos);
        }

        #[test]
        fn recall_is_monotone_in_k(ranks in prop::collection::vec(0usize..20, 1..50)) {
            let r: Vec<f64> = (1..=20).map(|k| recall_at_k(&ranks, k).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
