//! Per-arm reward statistics and UCB1 ranking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::{Intervention, Inventory};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BanditError {
    #[error("unknown arm {0:?}")]
    UnknownArm(String),
    #[error("rating {0} is outside 0..=5")]
    RatingOutOfRange(i64),
}

/// An explicit user rating on the 0 to 5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Rating(u8);

impl Rating {
    pub const MAX: u8 = 5;

    pub fn new(value: i64) -> Result<Self, BanditError> {
        if (0..=Self::MAX as i64).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(BanditError::RatingOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

impl TryFrom<i64> for Rating {
    type Error = BanditError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Rating::new(value)
    }
}

impl From<Rating> for u8 {
    fn from(r: Rating) -> u8 {
        r.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub explicit_pulls: u64,
    pub implicit_pulls: u64,
    /// Explicit ratings plus implicit pseudo-rewards.
    pub reward_sum: f64,
}

impl ArmStats {
    pub fn total_pulls(&self) -> u64 {
        self.explicit_pulls + self.implicit_pulls
    }

    pub fn mean(&self) -> Option<f64> {
        match self.total_pulls() {
            0 => None,
            n => Some(self.reward_sum / n as f64),
        }
    }

    pub fn add(&mut self, other: &ArmStats) {
        self.explicit_pulls += other.explicit_pulls;
        self.implicit_pulls += other.implicit_pulls;
        self.reward_sum += other.reward_sum;
    }
}

/// UCB1 score: `mean + c * sqrt(2 ln N / n)`, or `+inf` for an untried arm.
pub fn ucb_score(stats: &ArmStats, context_total: u64, c: f64) -> f64 {
    let n = stats.total_pulls();
    if n == 0 {
        return f64::INFINITY;
    }
    let mean = stats.reward_sum / n as f64;
    let total = context_total.max(1) as f64;
    mean + c * (2.0 * total.ln() / n as f64).sqrt()
}

/// Reward statistics for one scope (global, one user, or one cluster),
/// keyed by context and then intervention id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    entries: BTreeMap<String, BTreeMap<String, ArmStats>>,
    session_count: u64,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session_count(&self) -> u64 {
        self.session_count
    }

    pub fn get(&self, context: &str, arm: &str) -> ArmStats {
        self.entries
            .get(context)
            .and_then(|m| m.get(arm))
            .copied()
            .unwrap_or_default()
    }

    /// Iterate `(context, arm, stats)` over every stored entry in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &ArmStats)> {
        self.entries.iter().flat_map(|(ctx, arms)| {
            arms.iter().map(move |(arm, s)| (ctx.as_str(), arm.as_str(), s))
        })
    }

    /// Sum of pulls (explicit and implicit) recorded under `context`.
    pub fn context_pulls(&self, context: &str) -> u64 {
        self.entries
            .get(context)
            .map(|m| m.values().map(ArmStats::total_pulls).sum())
            .unwrap_or(0)
    }

    fn entry_mut(&mut self, context: &str, arm: &str) -> &mut ArmStats {
        self.entries
            .entry(context.to_string())
            .or_default()
            .entry(arm.to_string())
            .or_default()
    }

    /// Record one explicit rating for `choice`.
    pub fn apply_feedback(
        &mut self,
        inventory: &Inventory,
        context: &str,
        choice: &str,
        rating: Rating,
    ) -> Result<(), BanditError> {
        self.apply_observation(inventory, context, choice, rating.as_f64())
    }

    /// Record one explicit observation with a real-valued reward. Used for
    /// ratings and for imputed rewards, which need not be integral.
    pub fn apply_observation(
        &mut self,
        inventory: &Inventory,
        context: &str,
        choice: &str,
        reward: f64,
    ) -> Result<(), BanditError> {
        if inventory.index_of(choice).is_none() {
            return Err(BanditError::UnknownArm(choice.to_string()));
        }
        let e = self.entry_mut(context, choice);
        e.explicit_pulls += 1;
        e.reward_sum += reward;
        self.session_count += 1;
        Ok(())
    }

    /// Credit a pseudo-pull with `implicit_reward` to each unchosen arm.
    /// Does not count as a session.
    pub fn apply_implicit(
        &mut self,
        inventory: &Inventory,
        context: &str,
        unchosen: &[String],
        implicit_reward: f64,
    ) -> Result<(), BanditError> {
        if let Some(bad) = unchosen.iter().find(|id| inventory.index_of(id).is_none()) {
            return Err(BanditError::UnknownArm(bad.clone()));
        }
        for arm in unchosen {
            let e = self.entry_mut(context, arm);
            e.implicit_pulls += 1;
            e.reward_sum += implicit_reward;
        }
        Ok(())
    }

    /// Entry-wise add another table into this one.
    pub fn merge(&mut self, other: &ScoreTable) {
        for (ctx, arm, s) in other.iter() {
            self.entry_mut(ctx, arm).add(s);
        }
        self.session_count += other.session_count;
    }

    /// Rank `arms` by UCB score within `context` and keep the best `k`.
    ///
    /// Ties, including several untried arms, keep the order of `arms`.
    pub fn rank_arms<'a>(
        &self,
        context: &str,
        arms: &[&'a Intervention],
        k: usize,
        c: f64,
    ) -> Vec<&'a Intervention> {
        let total = self.context_pulls(context).max(1);
        let mut scored: Vec<(usize, f64)> = arms
            .iter()
            .enumerate()
            .map(|(pos, arm)| (pos, ucb_score(&self.get(context, &arm.id), total, c)))
            .collect();
        // Stable sort on score alone keeps positional order among ties.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.into_iter().take(k).map(|(pos, _)| arms[pos]).collect()
    }
}
