use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bandit::Rating;

/// Which score table produced a recommendation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Personal,
    Cluster,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Personal => "personal",
            Scope::Cluster => "cluster",
        }
    }
}

/// The final record of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session_id: String,
    pub user_id: String,
    pub context: String,
    pub arms: Vec<String>,
    pub choice: Option<String>,
    pub rating: Option<Rating>,
    /// Reward imputed from cluster statistics when the rating is missing.
    pub imputed_reward: Option<f64>,
    pub timestamp_ms: i64,
}

impl SessionEvent {
    pub fn imputed(&self) -> bool {
        self.imputed_reward.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    SessionStarted {
        session_id: String,
        user_id: String,
        context: String,
        arms: Vec<String>,
        scope: Scope,
        /// Cluster the user was (re)assigned to, in cluster scope.
        cluster: Option<usize>,
        timestamp_ms: i64,
    },
    ChoiceMade {
        session_id: String,
        choice: String,
        timestamp_ms: i64,
    },
    FeedbackGiven(SessionEvent),
    SessionExpired(SessionEvent),
    ModelRefitted {
        centroids: Vec<Vec<f64>>,
        memberships: BTreeMap<String, usize>,
        timestamp_ms: i64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SessionStarted { .. } => "session_started",
            EventKind::ChoiceMade { .. } => "choice_made",
            EventKind::FeedbackGiven(_) => "feedback_given",
            EventKind::SessionExpired(_) => "session_expired",
            EventKind::ModelRefitted { .. } => "model_refitted",
        }
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub event: EventKind,
}
