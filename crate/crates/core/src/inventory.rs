//! Expert-editable intervention inventory and engine configuration.
//!
//! The inventory is a YAML document with four top-level keys:
//!
//! ```yaml
//! recommend_count: 3
//! contexts: [home, work]
//! engine:
//!   threshold: 5
//!   exploration_c: 1.0
//! interventions:
//!   - title: STOP
//!     description: Stop, take a breath, look around, then carry on.
//!     image: image.png
//!     context: home
//! ```
//!
//! Every `engine` field is optional. Unknown keys anywhere in the document
//! are rejected so that typos surface at load time instead of silently
//! falling back to defaults.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Context tag matching every declared context.
pub const ANY_CONTEXT: &str = "any";

#[derive(Debug, Error)]
pub enum InventoryError {
    #[error("inventory file not found: {0}")]
    FileNotFound(String),
    #[error("failed to read inventory: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error{}: {message}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown context {0:?}")]
    UnknownContext(String),
}

/// One recommendable item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intervention {
    pub id: String,
    pub title: String,
    pub description: String,
    pub image: String,
    pub context: String,
}

impl Intervention {
    pub fn is_eligible(&self, context: &str) -> bool {
        self.context == ANY_CONTEXT || self.context == context
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventory {
    contexts: Vec<String>,
    interventions: Vec<Intervention>,
    recommend_count: usize,
}

/// Tunable parameters of the recommendation engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Completed sessions before a user is served from cluster statistics.
    pub threshold: u64,
    /// Weight of the UCB exploration bonus.
    pub exploration_c: f64,
    pub implicit_enabled: bool,
    /// Pseudo-reward credited to offered arms the user did not pick.
    pub implicit_reward: f64,
    pub num_clusters: usize,
    /// Completed sessions (across all users) between full k-means refits.
    pub refit_interval: u64,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    pub clustering_enabled: bool,
    /// Impute a missing rating from the user's cluster statistics.
    pub impute_missing: bool,
    pub session_timeout_secs: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            threshold: 5,
            exploration_c: 1.0,
            implicit_enabled: false,
            implicit_reward: -1.0,
            num_clusters: 3,
            refit_interval: 10,
            kmeans_max_iters: 100,
            seed: 42,
            clustering_enabled: true,
            impute_missing: true,
            session_timeout_secs: 15 * 60,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), InventoryError> {
        if self.threshold < 1 {
            return Err(InventoryError::Validation("engine.threshold must be >= 1".into()));
        }
        if self.num_clusters < 1 {
            return Err(InventoryError::Validation("engine.num_clusters must be >= 1".into()));
        }
        if self.refit_interval < 1 {
            return Err(InventoryError::Validation("engine.refit_interval must be >= 1".into()));
        }
        if self.kmeans_max_iters < 1 {
            return Err(InventoryError::Validation(
                "engine.kmeans_max_iters must be >= 1".into(),
            ));
        }
        if !(self.exploration_c >= 0.0 && self.exploration_c.is_finite()) {
            return Err(InventoryError::Validation(
                "engine.exploration_c must be a finite non-negative number".into(),
            ));
        }
        if !self.implicit_reward.is_finite() {
            return Err(InventoryError::Validation("engine.implicit_reward must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterventionDoc {
    title: String,
    description: String,
    #[serde(default)]
    image: String,
    context: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InventoryDoc {
    recommend_count: i64,
    contexts: Vec<String>,
    #[serde(default)]
    engine: EngineConfig,
    interventions: Vec<InterventionDoc>,
}

/// Lowercase the title, map every run of non-alphanumeric characters to a
/// single `-`, and strip leading/trailing dashes.
pub fn slugify(title: &str) -> String {
    let mut slug = String::with_capacity(title.len());
    let mut pending_dash = false;
    for ch in title.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            if pending_dash && !slug.is_empty() {
                slug.push('-');
            }
            pending_dash = false;
            slug.push(ch);
        } else {
            pending_dash = true;
        }
    }
    slug
}

/// Read and validate an inventory file.
pub fn load_inventory(path: impl AsRef<Path>) -> Result<(Inventory, EngineConfig), InventoryError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => InventoryError::FileNotFound(path.display().to_string()),
        _ => InventoryError::Io(e),
    })?;
    parse_inventory(&text)
}

/// Parse and validate an inventory document held in memory.
pub fn parse_inventory(text: &str) -> Result<(Inventory, EngineConfig), InventoryError> {
    // Syntax first, so malformed YAML reports a line; schema problems
    // (unknown keys, wrong types) are validation failures.
    let value: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| InventoryError::Parse {
        line: e.location().map(|l| l.line()),
        message: e.to_string(),
    })?;
    let doc: InventoryDoc =
        serde_yaml::from_value(value).map_err(|e| InventoryError::Validation(e.to_string()))?;
    doc.engine.validate()?;
    let inventory = Inventory::new(
        doc.contexts,
        doc.interventions
            .into_iter()
            .map(|d| (d.title, d.description, d.image, d.context))
            .collect(),
        doc.recommend_count,
    )?;
    Ok((inventory, doc.engine))
}

impl Inventory {
    /// Build a validated inventory from `(title, description, image, context)`
    /// tuples.
    pub fn new(
        contexts: Vec<String>,
        items: Vec<(String, String, String, String)>,
        recommend_count: i64,
    ) -> Result<Self, InventoryError> {
        if recommend_count < 1 {
            return Err(InventoryError::Validation(format!(
                "recommend_count must be >= 1, got {recommend_count}"
            )));
        }
        if contexts.is_empty() {
            return Err(InventoryError::Validation("contexts must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for c in &contexts {
            if c == ANY_CONTEXT {
                return Err(InventoryError::Validation(format!(
                    "{ANY_CONTEXT:?} is reserved and cannot be declared as a context"
                )));
            }
            if !seen.insert(c.as_str()) {
                return Err(InventoryError::Validation(format!("duplicate context {c:?}")));
            }
        }

        let mut ids = HashSet::new();
        let mut interventions = Vec::with_capacity(items.len());
        for (title, description, image, context) in items {
            let id = slugify(&title);
            if id.is_empty() {
                return Err(InventoryError::Validation(format!(
                    "title {title:?} has no alphanumeric characters"
                )));
            }
            if !ids.insert(id.clone()) {
                return Err(InventoryError::Validation(format!("duplicate id {id:?}")));
            }
            if context != ANY_CONTEXT && !seen.contains(context.as_str()) {
                return Err(InventoryError::Validation(format!(
                    "intervention {id:?} has unknown context tag {context:?}"
                )));
            }
            interventions.push(Intervention { id, title, description, image, context });
        }

        for c in &contexts {
            if !interventions.iter().any(|i| i.is_eligible(c)) {
                return Err(InventoryError::Validation(format!(
                    "context {c:?} has no eligible interventions"
                )));
            }
        }

        Ok(Self { contexts, interventions, recommend_count: recommend_count as usize })
    }

    pub fn contexts(&self) -> &[String] {
        &self.contexts
    }

    pub fn interventions(&self) -> &[Intervention] {
        &self.interventions
    }

    pub fn recommend_count(&self) -> usize {
        self.recommend_count
    }

    pub fn len(&self) -> usize {
        self.interventions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty()
    }

    pub fn has_context(&self, context: &str) -> bool {
        self.contexts.iter().any(|c| c == context)
    }

    /// Position of an intervention in inventory order.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.interventions.iter().position(|i| i.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&Intervention> {
        self.interventions.iter().find(|i| i.id == id)
    }

    /// Interventions usable in `context`, in inventory order.
    pub fn eligible_arms(&self, context: &str) -> Result<Vec<&Intervention>, InventoryError> {
        if !self.has_context(context) {
            return Err(InventoryError::UnknownContext(context.to_string()));
        }
        Ok(self.interventions.iter().filter(|i| i.is_eligible(context)).collect())
    }

    /// Render the inventory (and engine parameters) back into the YAML
    /// document format accepted by [`parse_inventory`].
    pub fn to_yaml(&self, config: &EngineConfig) -> String {
        let doc = InventoryDoc {
            recommend_count: self.recommend_count as i64,
            contexts: self.contexts.clone(),
            engine: config.clone(),
            interventions: self
                .interventions
                .iter()
                .map(|i| InterventionDoc {
                    title: i.title.clone(),
                    description: i.description.clone(),
                    image: i.image.clone(),
                    context: i.context.clone(),
                })
                .collect(),
        };
        serde_yaml::to_string(&doc).expect("inventory document is always serializable")
    }
}
