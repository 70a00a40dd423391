//! User preference vectors and the cluster model built over them.

mod kmeans;

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{kmeans_fit, nearest, squared_distance, wcss, KMeansFit};

use crate::bandit::{BanditError, Rating, ScoreTable};
use crate::inventory::Inventory;

/// Value held by an intervention the user has never rated.
pub const NEUTRAL_PRIOR: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("cluster model has not been fitted")]
    NotFitted,
}

/// Per-intervention mean explicit rating, in inventory order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    values: Vec<f64>,
    counts: Vec<u64>,
}

impl PreferenceVector {
    pub fn new(dim: usize) -> Self {
        Self { values: vec![NEUTRAL_PRIOR; dim], counts: vec![0; dim] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn update(
        &mut self,
        inventory: &Inventory,
        choice: &str,
        rating: Rating,
    ) -> Result<(), BanditError> {
        let i = inventory
            .index_of(choice)
            .ok_or_else(|| BanditError::UnknownArm(choice.to_string()))?;
        let n = self.counts[i];
        self.values[i] = if n == 0 {
            rating.as_f64()
        } else {
            (self.values[i] * n as f64 + rating.as_f64()) / (n + 1) as f64
        };
        self.counts[i] = n + 1;
        Ok(())
    }
}

/// A grouping of users: centroids plus the cluster index of every member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub centroids: Vec<Vec<f64>>,
    pub memberships: BTreeMap<String, usize>,
}

/// Pluggable clustering backend. Only k-means ships; any algorithm that
/// yields centroids in preference-vector space can be swapped in.
pub trait ClusterAlgorithm: Send + Sync {
    fn fit(&self, points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>);
}

#[derive(Debug, Clone, Copy)]
pub struct KMeans {
    pub max_iters: usize,
}

impl ClusterAlgorithm for KMeans {
    fn fit(&self, points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let fit = kmeans_fit(points, k, self.max_iters, seed);
        (fit.centroids, fit.assignments)
    }
}

/// Cluster users given as `(user_id, preference values)`. Returns `None`
/// when there is nobody to cluster.
pub fn fit_partition(
    algorithm: &dyn ClusterAlgorithm,
    users: &[(String, Vec<f64>)],
    k: usize,
    seed: u64,
) -> Option<Partition> {
    if users.is_empty() {
        return None;
    }
    let points: Vec<Vec<f64>> = users.iter().map(|(_, v)| v.clone()).collect();
    let (centroids, assignments) = algorithm.fit(&points, k, seed);
    let memberships = users.iter().map(|(id, _)| id.clone()).zip(assignments).collect();
    Some(Partition { centroids, memberships })
}

/// Centroids, memberships and cluster-scope score tables.
///
/// Each cluster table is the entry-wise sum of its members' observed
/// (non-imputed) personal tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    centroids: Vec<Vec<f64>>,
    tables: Vec<ScoreTable>,
    memberships: BTreeMap<String, usize>,
}

impl ClusterModel {
    pub fn is_fitted(&self) -> bool {
        !self.centroids.is_empty()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn tables(&self) -> &[ScoreTable] {
        &self.tables
    }

    pub fn table(&self, cluster: usize) -> &ScoreTable {
        &self.tables[cluster]
    }

    pub fn memberships(&self) -> &BTreeMap<String, usize> {
        &self.memberships
    }

    pub fn membership(&self, user: &str) -> Option<usize> {
        self.memberships.get(user).copied()
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn get_cluster(&self, pv: &PreferenceVector) -> Result<usize, ClusterError> {
        if !self.is_fitted() {
            return Err(ClusterError::NotFitted);
        }
        Ok(nearest(pv.values(), &self.centroids))
    }

    /// Replace centroids and memberships and rebuild every cluster table
    /// from the members' observed tables.
    pub fn install<'a>(
        &mut self,
        partition: Partition,
        observed: impl Fn(&str) -> Option<&'a ScoreTable>,
    ) {
        let k = partition.centroids.len();
        self.centroids = partition.centroids;
        self.memberships = partition.memberships;
        self.tables = vec![ScoreTable::new(); k];
        for (user, &c) in &self.memberships {
            if let Some(t) = observed(user) {
                self.tables[c].merge(t);
            }
        }
    }

    /// Put `user` in `cluster`, moving their statistics out of any previous
    /// cluster. The vacated cluster is rebuilt from its remaining members.
    pub fn assign<'a>(
        &mut self,
        user: &str,
        cluster: usize,
        observed: impl Fn(&str) -> Option<&'a ScoreTable>,
    ) {
        let previous = self.memberships.insert(user.to_string(), cluster);
        if previous == Some(cluster) {
            return;
        }
        if let Some(p) = previous {
            self.rebuild_table(p, &observed);
        }
        if let Some(t) = observed(user) {
            self.tables[cluster].merge(t);
        }
    }

    /// The table `cluster` would hold after [`assign`](Self::assign)ing
    /// `user` (whose observed table is `own`) to it.
    pub fn preview_table(&self, user: &str, cluster: usize, own: &ScoreTable) -> Cow<'_, ScoreTable> {
        if self.membership(user) == Some(cluster) {
            Cow::Borrowed(&self.tables[cluster])
        } else {
            let mut t = self.tables[cluster].clone();
            t.merge(own);
            Cow::Owned(t)
        }
    }

    fn rebuild_table<'a>(&mut self, cluster: usize, observed: &impl Fn(&str) -> Option<&'a ScoreTable>) {
        let mut table = ScoreTable::new();
        for (user, _) in self.memberships.iter().filter(|(_, &c)| c == cluster) {
            if let Some(t) = observed(user) {
                table.merge(t);
            }
        }
        self.tables[cluster] = table;
    }

    /// Fold one session's observed delta into the member's cluster table.
    /// Unclustered users contribute nothing.
    pub fn fold(&mut self, user: &str, delta: &ScoreTable) {
        if let Some(c) = self.membership(user) {
            self.tables[c].merge(delta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inventory::Inventory;
    use proptest::prelude::*;

    fn inventory(n: usize) -> Inventory {
        Inventory::new(
            vec!["home".into()],
            (0..n).map(|i| (format!("arm{i}"), String::new(), String::new(), "any".into())).collect(),
            1,
        )
        .unwrap()
    }

    fn r(v: i64) -> Rating {
        Rating::new(v).unwrap()
    }

    fn model(centroids: Vec<Vec<f64>>) -> ClusterModel {
        let mut m = ClusterModel::default();
        m.install(Partition { centroids, memberships: BTreeMap::new() }, |_| None);
        m
    }

    fn pv(values: &[f64]) -> PreferenceVector {
        PreferenceVector { values: values.to_vec(), counts: vec![1; values.len()] }
    }

    #[test]
    fn preference_updates() {
        let inv = inventory(3);
        let mut p = PreferenceVector::new(3);
        p.update(&inv, "arm0", r(5)).unwrap();
        assert_eq!(p.values(), &[5.0, 2.5, 2.5]);

        let mut p = PreferenceVector::new(3);
        p.update(&inv, "arm0", r(3)).unwrap();
        p.update(&inv, "arm0", r(5)).unwrap();
        assert_eq!((p.values()[0], p.counts()[0]), (4.0, 2));
        p.update(&inv, "arm0", r(1)).unwrap();
        // Recomputed from the full list [3, 5, 1].
        assert_eq!(p.values()[0], (3.0 + 5.0 + 1.0) / 3.0);
        assert_eq!(p.counts()[0], 3);

        p.update(&inv, "arm1", r(0)).unwrap();
        assert_eq!(p.values()[0], 3.0);
        assert!(p.update(&inv, "missing", r(1)).is_err());
    }

    #[test]
    fn get_cluster_cases() {
        assert_eq!(ClusterModel::default().get_cluster(&pv(&[0.0])), Err(ClusterError::NotFitted));

        let m = model(vec![vec![0.0, 0.0], vec![3.0, 3.0], vec![1.0, 2.0]]);
        assert_eq!(m.get_cluster(&pv(&[1.0, 2.0])), Ok(2));

        let m = model(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(m.get_cluster(&pv(&[0.0, 0.0])), Ok(0));

        let m = model(vec![vec![1.0, 0.0], vec![5.0, 0.0]]);
        assert_eq!(m.get_cluster(&pv(&[0.0, 0.0])), Ok(0));
    }

    #[test]
    fn fold_and_assign() {
        let inv = inventory(2);
        let mut alice = ScoreTable::new();
        alice.apply_feedback(&inv, "home", "arm0", r(4)).unwrap();
        let mut bob = ScoreTable::new();
        bob.apply_feedback(&inv, "home", "arm1", r(2)).unwrap();
        let tables: BTreeMap<&str, ScoreTable> = [("alice", alice.clone()), ("bob", bob.clone())].into();
        let lookup = |u: &str| tables.get(u);

        let mut m = model(vec![vec![0.0, 0.0], vec![5.0, 5.0]]);
        m.assign("alice", 1, lookup);
        assert_eq!(m.table(1), &alice);

        let mut delta = ScoreTable::new();
        delta.apply_feedback(&inv, "home", "arm0", r(4)).unwrap();
        m.fold("alice", &delta);
        assert_eq!(m.table(1).get("home", "arm0").explicit_pulls, 2);
        assert_eq!(m.table(1).get("home", "arm0").reward_sum, 8.0);
        m.fold("carol", &delta);
        assert_eq!(m.table(0), &ScoreTable::new());

        // Moving rebuilds from members' own tables.
        m.assign("bob", 1, lookup);
        m.assign("alice", 0, lookup);
        assert_eq!(m.table(0), &alice);
        assert_eq!(m.table(1), &bob);
    }

    #[test]
    fn empty_refit_leaves_model_unfitted() {
        let algo = KMeans { max_iters: 10 };
        assert!(fit_partition(&algo, &[], 3, 0).is_none());
        assert!(!ClusterModel::default().is_fitted());
    }

    proptest! {
        #[test]
        fn neutral_dimension_does_not_change_assignment(
            centroids in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 1..5),
            point in prop::collection::vec(0.0f64..5.0, 3),
        ) {
            let base = model(centroids.clone());
            let widened = model(centroids.into_iter().map(|mut c| { c.push(NEUTRAL_PRIOR); c }).collect());
            let mut p2 = point.clone();
            p2.push(NEUTRAL_PRIOR);
            prop_assert_eq!(base.get_cluster(&pv(&point)), widened.get_cluster(&pv(&p2)));
        }

        #[test]
        fn preference_entries_stay_in_range(ratings in prop::collection::vec((0usize..4, 0i64..=5), 0..50)) {
            let inv = inventory(4);
            let mut p = PreferenceVector::new(4);
            for (arm, x) in ratings {
                p.update(&inv, &format!("arm{arm}"), r(x)).unwrap();
            }
            for (v, c) in p.values().iter().zip(p.counts()) {
                if *c == 0 {
                    prop_assert_eq!(*v, NEUTRAL_PRIOR);
                } else {
                    prop_assert!((0.0..=5.0).contains(v));
                }
            }
        }
    }
}
