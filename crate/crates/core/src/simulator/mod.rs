//! Synthetic users with latent preferences, driving the engine end to end.

mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

pub use metrics::adjusted_rand_index;

use crate::bandit::Rating;
use crate::engine::{Engine, EngineError, ManualClock};
use crate::inventory::{EngineConfig, Inventory};
use crate::persistence::Scope;

/// Latent mean rating indexed by `[context][intervention]`, both in
/// inventory order. Entries for arms not eligible in a context are unused.
pub type LatentTable = Vec<Vec<f64>>;

pub const DEFAULT_JITTER: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct UserModel {
    pub user_id: String,
    pub latent: LatentTable,
    pub sigma: f64,
    pub missing_prob: f64,
    /// Ground-truth group.
    pub prototype: usize,
}

/// Build a population by assigning users round-robin to `prototypes` and
/// perturbing each latent mean with Gaussian noise of stddev `jitter`,
/// clamped to `[0, 5]`.
pub fn generate_population(
    num_users: usize,
    prototypes: &[LatentTable],
    sigma: f64,
    missing_prob: f64,
    jitter: f64,
    seed: u64,
) -> Vec<UserModel> {
    assert!(!prototypes.is_empty(), "at least one prototype is required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, jitter).expect("jitter must be finite and non-negative");
    (0..num_users)
        .map(|i| {
            let prototype = i % prototypes.len();
            let latent = prototypes[prototype]
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 5.0))
                        .collect()
                })
                .collect();
            UserModel {
                user_id: format!("u{i:03}"),
                latent,
                sigma,
                missing_prob: missing_prob.clamp(0.0, 1.0),
                prototype,
            }
        })
        .collect()
}

/// `count` prototypes over `inventory`: prototype `p` rates intervention `i`
/// at `high` when `i % count == p` and at `low` otherwise, in every context.
pub fn striped_prototypes(inventory: &Inventory, count: usize, high: f64, low: f64) -> Vec<LatentTable> {
    (0..count)
        .map(|p| {
            let row: Vec<f64> = (0..inventory.len())
                .map(|i| if i % count == p { high } else { low })
                .collect();
            vec![row; inventory.contexts().len()]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub round: usize,
    pub user_id: String,
    pub prototype: usize,
    pub context: String,
    pub scope: Scope,
    pub offered: Vec<String>,
    pub chosen: String,
    pub rating: Option<u8>,
    pub imputed: bool,
    pub oracle_best: String,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub trace: Vec<TraceRow>,
    pub cumulative_regret: Vec<f64>,
    /// Final cluster membership per clustered user.
    pub memberships: BTreeMap<String, usize>,
    /// Agreement of final memberships with prototypes, over clustered users.
    pub ari: Option<f64>,
    pub refits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub sessions: usize,
    pub users: usize,
    pub total_regret: f64,
    pub mean_regret: f64,
    pub best_arm_rate: f64,
    pub best_arm_rate_windows: Vec<f64>,
    pub window: usize,
    pub sessions_by_scope: BTreeMap<String, usize>,
    pub missing_feedback: usize,
    pub imputed: usize,
    pub clustered_users: usize,
    pub refits: u64,
    pub ari: Option<f64>,
}

impl SimReport {
    pub fn total_regret(&self) -> f64 {
        self.cumulative_regret.last().copied().unwrap_or(0.0)
    }

    /// Share of sessions in `range` (by step index) where the chosen arm was
    /// the oracle-best arm.
    pub fn best_arm_rate(&self, range: std::ops::Range<usize>) -> f64 {
        let rows = &self.trace[range.start.min(self.trace.len())..range.end.min(self.trace.len())];
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.chosen == r.oracle_best).count() as f64 / rows.len() as f64
    }

    pub fn windowed_best_arm_rate(&self, window: usize) -> Vec<f64> {
        (0..self.trace.len())
            .step_by(window.max(1))
            .map(|start| self.best_arm_rate(start..start + window))
            .collect()
    }

    pub fn summary(&self, window: usize) -> SimSummary {
        let mut by_scope = BTreeMap::new();
        for r in &self.trace {
            *by_scope.entry(r.scope.as_str().to_string()).or_default() += 1;
        }
        let users: std::collections::BTreeSet<_> = self.trace.iter().map(|r| &r.user_id).collect();
        SimSummary {
            sessions: self.trace.len(),
            users: users.len(),
            total_regret: self.total_regret(),
            mean_regret: if self.trace.is_empty() { 0.0 } else { self.total_regret() / self.trace.len() as f64 },
            best_arm_rate: self.best_arm_rate(0..self.trace.len()),
            best_arm_rate_windows: self.windowed_best_arm_rate(window),
            window,
            sessions_by_scope: by_scope,
            missing_feedback: self.trace.iter().filter(|r| r.rating.is_none()).count(),
            imputed: self.trace.iter().filter(|r| r.imputed).count(),
            clustered_users: self.memberships.len(),
            refits: self.refits,
            ari: self.ari,
        }
    }

    /// Per-session trace as CSV. Columns: step, round, user_id, prototype,
    /// context, scope, offered (`;`-joined), chosen, rating (empty when
    /// missing), imputed, oracle_best, regret, cumulative_regret.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step", "round", "user_id", "prototype", "context", "scope", "offered", "chosen",
            "rating", "imputed", "oracle_best", "regret", "cumulative_regret",
        ])?;
        for (r, cum) in self.trace.iter().zip(&self.cumulative_regret) {
            w.write_record([
                r.step.to_string(),
                r.round.to_string(),
                r.user_id.clone(),
                r.prototype.to_string(),
                r.context.clone(),
                r.scope.as_str().to_string(),
                r.offered.join(";"),
                r.chosen.clone(),
                r.rating.map(|v| v.to_string()).unwrap_or_default(),
                r.imputed.to_string(),
                r.oracle_best.clone(),
                r.regret.to_string(),
                cum.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `report.csv` and `summary.json` into `dir`.
    pub fn write_files(&self, dir: &Path, window: usize) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut csv_bytes = Vec::new();
        self.write_csv(&mut csv_bytes).map_err(io::Error::other)?;
        fs::write(dir.join("report.csv"), csv_bytes)?;
        let json = serde_json::to_string_pretty(&self.summary(window)).map_err(io::Error::other)?;
        fs::write(dir.join("summary.json"), json + "\n")?;
        Ok(())
    }
}

fn argmax_first<'a>(ids: impl Iterator<Item = (&'a str, f64)>) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (id, v) in ids {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.map(|(id, _)| id)
}

/// Run `sessions_per_user` rounds; in each round every user in turn gets one
/// session in a uniformly drawn context, picks the offered arm with the
/// highest latent mean and, unless feedback goes missing, rates it
/// `clamp(round(N(latent, sigma)), 0, 5)`.
///
/// When `clock` is given it advances one minute per session.
pub fn simulate(
    population: &[UserModel],
    engine: &mut Engine,
    sessions_per_user: usize,
    seed: u64,
    clock: Option<&ManualClock>,
) -> Result<SimReport, EngineError> {
    simulate_with(population, engine, sessions_per_user, seed, clock, |_, _| Ok(()))
}

/// [`simulate`], calling `after_round(round, engine)` once every user has
/// had their session in that round.
pub fn simulate_with(
    population: &[UserModel],
    engine: &mut Engine,
    sessions_per_user: usize,
    seed: u64,
    clock: Option<&ManualClock>,
    mut after_round: impl FnMut(usize, &mut Engine) -> Result<(), EngineError>,
) -> Result<SimReport, EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inventory = engine.inventory().clone();
    let contexts = inventory.contexts().to_vec();
    let index: BTreeMap<&str, usize> =
        inventory.interventions().iter().enumerate().map(|(i, x)| (x.id.as_str(), i)).collect();

    let mut trace = Vec::with_capacity(population.len() * sessions_per_user);
    let mut cumulative_regret = Vec::with_capacity(trace.capacity());
    let mut running = 0.0;

    for round in 0..sessions_per_user {
        for user in population {
            let ctx_idx = rng.random_range(0..contexts.len());
            let context = &contexts[ctx_idx];
            let latent = &user.latent[ctx_idx];
            // Draw both random quantities every session so the stream stays
            // aligned regardless of what the engine offers.
            let missing = rng.random::<f64>() < user.missing_prob;
            let noise: f64 = Normal::new(0.0, user.sigma)
                .expect("sigma must be finite and non-negative")
                .sample(&mut rng);

            let reco = engine.start_session(&user.user_id, context)?;
            let chosen = argmax_first(reco.arms.iter().map(|a| (a.as_str(), latent[index[a.as_str()]])))
                .expect("recommendation sets are never empty")
                .to_string();
            engine.submit_choice(&reco.session_id, &chosen)?;
            let rating = (!missing).then(|| {
                let raw = (latent[index[chosen.as_str()]] + noise).round().clamp(0.0, 5.0);
                Rating::new(raw as i64).expect("clamped to the rating range")
            });
            let summary = engine.submit_feedback(&reco.session_id, rating)?;

            let eligible = inventory.eligible_arms(context).expect("context comes from the inventory");
            let oracle_best = argmax_first(eligible.iter().map(|a| (a.id.as_str(), latent[index[a.id.as_str()]])))
                .expect("every context has an eligible arm")
                .to_string();
            let regret = (latent[index[oracle_best.as_str()]] - latent[index[chosen.as_str()]]).max(0.0);
            running += regret;
            cumulative_regret.push(running);
            trace.push(TraceRow {
                step: trace.len(),
                round,
                user_id: user.user_id.clone(),
                prototype: user.prototype,
                context: context.clone(),
                scope: reco.scope_used,
                offered: reco.arms,
                chosen,
                rating: rating.map(Rating::value),
                imputed: summary.imputed,
                oracle_best,
                regret,
            });
            if let Some(c) = clock {
                c.advance(60_000);
            }
        }
        after_round(round, engine)?;
    }

    let memberships = engine.state().clusters.memberships().clone();
    let (truth, predicted): (Vec<usize>, Vec<usize>) = population
        .iter()
        .filter_map(|u| memberships.get(&u.user_id).map(|&c| (u.prototype, c)))
        .unzip();
    let ari = (truth.len() >= 2).then(|| adjusted_rand_index(&truth, &predicted));
    Ok(SimReport {
        trace,
        cumulative_regret,
        memberships,
        ari,
        refits: engine.state().metrics.refits,
    })
}

/// Simulate against a fresh in-memory engine driven by a manual clock.
pub fn simulate_fresh(
    population: &[UserModel],
    inventory: Inventory,
    config: EngineConfig,
    sessions_per_user: usize,
    seed: u64,
) -> SimReport {
    let clock = Arc::new(ManualClock::new(0));
    let mut engine = Engine::with_clock(inventory, config, clock.clone());
    simulate(population, &mut engine, sessions_per_user, seed, Some(&clock))
        .expect("in-memory simulation cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inventory(n: usize, k: i64) -> Inventory {
        Inventory::new(
            vec!["home".into(), "work".into()],
            (0..n).map(|i| (format!("arm{i}"), String::new(), String::new(), "any".into())).collect(),
            k,
        )
        .unwrap()
    }

    #[test]
    fn population_without_jitter_is_identical() {
        let proto = vec![vec![vec![1.0, 4.0]; 2]];
        let pop = generate_population(3, &proto, 0.5, 0.0, 0.0, 9);
        assert_eq!(pop.len(), 3);
        assert!(pop.iter().all(|u| u.latent == proto[0]));
    }

    #[test]
    fn round_robin_prototypes() {
        let inv = inventory(6, 2);
        let protos = striped_prototypes(&inv, 3, 4.5, 1.0);
        let pop = generate_population(60, &protos, 0.5, 0.0, DEFAULT_JITTER, 1);
        for p in 0..3 {
            assert_eq!(pop.iter().filter(|u| u.prototype == p).count(), 20);
        }
        assert!(pop.iter().flat_map(|u| u.latent.iter().flatten()).all(|v| (0.0..=5.0).contains(v)));
        assert_eq!(pop, generate_population(60, &protos, 0.5, 0.0, DEFAULT_JITTER, 1));
        assert_ne!(pop, generate_population(60, &protos, 0.5, 0.0, DEFAULT_JITTER, 2));
    }

    #[test]
    fn single_arm_has_no_regret() {
        let inv = inventory(1, 1);
        let pop = generate_population(1, &[vec![vec![3.0]; 2]], 1.0, 0.0, 0.0, 0);
        let report = simulate_fresh(&pop, inv, EngineConfig::default(), 50, 3);
        assert!(report.trace.iter().all(|r| r.regret == 0.0));
        assert_eq!(report.total_regret(), 0.0);
    }

    #[test]
    fn greedy_engine_locks_onto_best_without_noise() {
        let inv = inventory(5, 1);
        let row = vec![1.0, 3.0, 5.0, 2.0, 0.0];
        let pop = generate_population(1, &[vec![row; 2]], 0.0, 0.0, 0.0, 0);
        let config = EngineConfig { exploration_c: 0.0, clustering_enabled: false, ..Default::default() };
        let report = simulate_fresh(&pop, inv, config, 60, 11);
        let mut tried: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
        for r in &report.trace {
            let seen = tried.entry(r.context.as_str()).or_default();
            if seen.len() == 5 {
                assert_eq!(r.chosen, r.oracle_best, "step {}", r.step);
            }
            seen.insert(r.chosen.as_str());
        }
        assert!(tried.values().all(|s| s.len() == 5));
    }

    #[test]
    fn regret_is_cumulative_and_non_negative() {
        let inv = inventory(4, 2);
        let protos = striped_prototypes(&inv, 2, 4.5, 1.0);
        let pop = generate_population(6, &protos, 0.7, 0.2, DEFAULT_JITTER, 5);
        let report = simulate_fresh(&pop, inv, EngineConfig::default(), 12, 8);
        assert_eq!(report.trace.len(), 72);
        assert!(report.trace.iter().all(|r| r.regret >= -1e-9));
        assert!(report.cumulative_regret.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn reports_are_deterministic() {
        let inv = inventory(4, 2);
        let protos = striped_prototypes(&inv, 2, 4.5, 1.0);
        let pop = generate_population(6, &protos, 0.7, 0.2, DEFAULT_JITTER, 5);
        let run = || {
            let r = simulate_fresh(&pop, inv.clone(), EngineConfig::default(), 15, 8);
            let mut bytes = Vec::new();
            r.write_csv(&mut bytes).unwrap();
            (bytes, serde_json::to_string(&r.summary(10)).unwrap())
        };
        assert_eq!(run(), run());
    }
}
