#![allow(dead_code)]

use std::sync::Arc;

use cmab_core::engine::ManualClock;
use cmab_core::{Engine, EngineConfig, Inventory};

/// `n` interventions named `A`, `B`, ... all usable in every context.
pub fn inventory(n: usize, k: i64, contexts: &[&str]) -> Inventory {
    Inventory::new(
        contexts.iter().map(|c| c.to_string()).collect(),
        (0..n)
            .map(|i| {
                let title = ((b'A' + i as u8) as char).to_string();
                (title.clone(), format!("do {title}"), String::new(), "any".to_string())
            })
            .collect(),
        k,
    )
    .unwrap()
}

pub fn engine(n: usize, k: i64, config: EngineConfig) -> (Engine, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(1_000));
    (Engine::with_clock(inventory(n, k, &["home", "work"]), config, clock.clone()), clock)
}

/// Run one complete session choosing `choice` (or the first offered arm).
pub fn session(engine: &mut Engine, user: &str, ctx: &str, choice: Option<&str>, rating: Option<i64>) {
    let reco = engine.start_session(user, ctx).unwrap();
    let pick = choice.map(str::to_string).unwrap_or_else(|| reco.arms[0].clone());
    engine.submit_choice(&reco.session_id, &pick).unwrap();
    engine
        .submit_feedback(&reco.session_id, rating.map(|r| cmab_core::Rating::new(r).unwrap()))
        .unwrap();
}

/// Entry-wise comparison with exact counts and reward sums within `tol`.
pub fn tables_match(a: &cmab_core::ScoreTable, b: &cmab_core::ScoreTable, tol: f64) -> Result<(), String> {
    if a.session_count() != b.session_count() {
        return Err(format!("session_count {} != {}", a.session_count(), b.session_count()));
    }
    let keys: std::collections::BTreeSet<(String, String)> = a
        .iter()
        .chain(b.iter())
        .map(|(c, arm, _)| (c.to_string(), arm.to_string()))
        .collect();
    for (c, arm) in keys {
        let (x, y) = (a.get(&c, &arm), b.get(&c, &arm));
        if x.explicit_pulls != y.explicit_pulls
            || x.implicit_pulls != y.implicit_pulls
            || (x.reward_sum - y.reward_sum).abs() > tol
        {
            return Err(format!("({c}, {arm}): {x:?} != {y:?}"));
        }
    }
    Ok(())
}

/// Global table equals the sum of personal tables; each cluster table
/// equals the sum of its members' observed tables.
pub fn check_aggregates(engine: &Engine) -> Result<(), String> {
    let state = engine.state();
    let mut sum = cmab_core::ScoreTable::new();
    for u in state.users.values() {
        sum.merge(&u.personal_table);
    }
    tables_match(&state.global, &sum, 1e-9).map_err(|e| format!("global: {e}"))?;
    for (idx, table) in state.clusters.tables().iter().enumerate() {
        let mut members = cmab_core::ScoreTable::new();
        for (user, _) in state.clusters.memberships().iter().filter(|(_, &c)| c == idx) {
            members.merge(&state.users[user].observed_table);
        }
        tables_match(table, &members, 1e-9).map_err(|e| format!("cluster {idx}: {e}"))?;
    }
    Ok(())
}
