use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

pub const DEFAULT_FOLDS: usize = 5;

/// What a row may be used for in the folds it is not held out of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowRole {
    Both,
    /// Trains other folds; never tested.
    TrainOnly,
    /// Tested in its own fold; never trains.
    TestOnly,
}

/// Test-fold assignment per sample. A `None` entry marks a row that is only
/// ever used for training (see [`FoldPlan::holdout`]). `roles` is empty or
/// one entry per row; empty means every row is [`RowRole::Both`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignments: Vec<Option<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roles: Vec<RowRole>,
}

impl FoldPlan {
    /// Single fold: the first `n_train` rows train, the next `n_test` test.
    pub fn holdout(n_train: usize, n_test: usize) -> Self {
        Self {
            n_folds: 1,
            seed: 0,
            assignments: std::iter::repeat_n(None, n_train)
                .chain(std::iter::repeat_n(Some(0), n_test))
                .collect(),
            roles: Vec::new(),
        }
    }

    fn role(&self, i: usize) -> RowRole {
        self.roles.get(i).copied().unwrap_or(RowRole::Both)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.assignments[i] == Some(fold) && self.role(i) != RowRole::TrainOnly)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.assignments[i] != Some(fold) && self.role(i) != RowRole::TestOnly)
            .collect()
    }
}

/// Shuffles the distinct users with a seeded RNG, then gives each user to the
/// fold currently holding the fewest samples (ties to the lowest fold index).
pub fn group_kfold<S: AsRef<str>>(user_ids: &[S], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(EvalError::TooFewFolds(n_folds));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for u in user_ids {
        *sizes.entry(u.as_ref()).or_default() += 1;
    }
    if sizes.len() < n_folds {
        return Err(EvalError::TooFewGroups {
            groups: sizes.len(),
            folds: n_folds,
        });
    }
    let mut users: Vec<(&str, usize)> = sizes.into_iter().collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut load = vec![0usize; n_folds];
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (u, n) in users {
        let f = (0..n_folds).min_by_key(|&f| (load[f], f)).unwrap();
        load[f] += n;
        fold_of.insert(u, f);
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        assignments: user_ids.iter().map(|u| Some(fold_of[u.as_ref()])).collect(),
        roles: Vec::new(),
    })
}

/// Group k-fold over two periods stacked as `train ++ test` rows. Fold `f`
/// trains on the earlier-period rows of users outside `f` and tests on the
/// later-period rows of users in `f`, so every test row is both unseen-user
/// and later in time.
pub fn temporal_group_kfold<S: AsRef<str>>(
    train_users: &[S],
    test_users: &[S],
    n_folds: usize,
    seed: u64,
) -> Result<FoldPlan> {
    let all: Vec<&str> = train_users.iter().chain(test_users).map(AsRef::as_ref).collect();
    let mut plan = group_kfold(&all, n_folds, seed)?;
    plan.roles = std::iter::repeat_n(RowRole::TrainOnly, train_users.len())
        .chain(std::iter::repeat_n(RowRole::TestOnly, test_users.len()))
        .collect();
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn one_user_per_fold() {
        let plan = group_kfold(&["a", "b", "c", "d", "e"], 5, 1).unwrap();
        let folds: BTreeSet<usize> = plan.assignments.iter().map(|a| a.unwrap()).collect();
        assert_eq!(folds.len(), 5);
    }

    #[test]
    fn users_never_span_folds() {
        let users: Vec<String> = (0..200).map(|i| format!("u{}", (i * 7) % 23)).collect();
        let plan = group_kfold(&users, 5, 3).unwrap();
        for f in 0..5 {
            let test: BTreeSet<&str> = plan.test_rows(f).iter().map(|&i| users[i].as_str()).collect();
            let train: BTreeSet<&str> = plan.train_rows(f).iter().map(|&i| users[i].as_str()).collect();
            assert!(test.is_disjoint(&train));
            assert!(!test.is_empty());
        }
    }

    #[test]
    fn greedy_balance_bound() {
        let mut users = Vec::new();
        for (u, n) in [5, 4, 3, 2, 1, 1, 1].into_iter().enumerate() {
            users.extend(std::iter::repeat_n(format!("u{u}"), n));
        }
        for seed in 0..50 {
            let plan = group_kfold(&users, 3, seed).unwrap();
            let sizes: Vec<usize> = (0..3).map(|f| plan.test_rows(f).len()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 5);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            group_kfold(&["a", "a", "b"], 3, 0),
            Err(EvalError::TooFewGroups { groups: 2, folds: 3 })
        ));
        assert!(matches!(group_kfold(&["a", "b"], 1, 0), Err(EvalError::TooFewFolds(1))));
    }

    #[test]
    fn seeded() {
        let users: Vec<String> = (0..40).map(|i| format!("u{i}")).collect();
        assert_eq!(group_kfold(&users, 5, 9).unwrap(), group_kfold(&users, 5, 9).unwrap());
    }

    #[test]
    fn temporal_plan_separates_users_and_periods() {
        let train = ["a", "a", "b", "c", "c"];
        let test = ["a", "b", "c", "c"];
        let plan = temporal_group_kfold(&train, &test, 3, 4).unwrap();
        let user = |i: usize| if i < 5 { train[i] } else { test[i - 5] };
        let mut tested = 0;
        for f in 0..3 {
            let tr = plan.train_rows(f);
            let te = plan.test_rows(f);
            assert!(tr.iter().all(|&i| i < 5) && te.iter().all(|&i| i >= 5));
            assert!(te.iter().all(|&i| tr.iter().all(|&j| user(i) != user(j))));
            tested += te.len();
        }
        assert_eq!(tested, 4);
    }

    #[test]
    fn holdout_plan() {
        let p = FoldPlan::holdout(3, 2);
        assert_eq!(p.train_rows(0), vec![0, 1, 2]);
        assert_eq!(p.test_rows(0), vec![3, 4]);
    }
}
