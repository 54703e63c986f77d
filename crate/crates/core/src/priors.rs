//! Normalcy priors keyed by (category, view).
//!
//! The on-disk form is a JSON object `{ category: { view: text } }`; the view
//! `*` is a wildcard consulted when no exact view matches.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;

use crate::evaluation::CategoryNormalizer;

pub const WILDCARD_VIEW: &str = "*";

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("prior {0} must not be empty")]
    EmptyField(&'static str),
    #[error("reading priors: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing priors: {0}")]
    Json(#[from] serde_json::Error),
    #[error("remote prior lookup failed: {0}")]
    Remote(String),
}

/// Anything that can answer a prior lookup: the local store, or a remote
/// retriever speaking the same signature.
pub trait PriorSource: Send + Sync {
    fn get_prior(&self, category: &str, view: &str) -> Result<Option<String>, PriorError>;
}

type Table = BTreeMap<String, BTreeMap<String, String>>;

/// In-memory prior table. Categories are normalized on both write and read.
#[derive(Debug, Default)]
pub struct PriorStore {
    normalizer: CategoryNormalizer,
    table: RwLock<Table>,
}

impl PriorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_normalizer(normalizer: CategoryNormalizer) -> Self {
        PriorStore {
            normalizer,
            table: RwLock::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        let raw: Table = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let store = PriorStore::new();
        for (category, views) in raw {
            for (view, text) in views {
                store.put_prior(&category, &view, &text)?;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PriorError> {
        let table = self.table.read().expect("prior table lock");
        std::fs::write(path, serde_json::to_string_pretty(&*table)?)?;
        Ok(())
    }

    fn key(&self, category: &str) -> Option<String> {
        self.normalizer.normalize(category).ok()
    }

    /// Inserts or overwrites the entry for `(category, view)`.
    pub fn put_prior(&self, category: &str, view: &str, text: &str) -> Result<(), PriorError> {
        if category.trim().is_empty() {
            return Err(PriorError::EmptyField("category"));
        }
        if view.trim().is_empty() {
            return Err(PriorError::EmptyField("view"));
        }
        if text.trim().is_empty() {
            return Err(PriorError::EmptyField("text"));
        }
        let cat = self.key(category).ok_or(PriorError::EmptyField("category"))?;
        self.table
            .write()
            .expect("prior table lock")
            .entry(cat)
            .or_default()
            .insert(view.trim().to_string(), text.to_string());
        Ok(())
    }

    /// Exact view first, then the wildcard view, then `None`.
    pub fn get(&self, category: &str, view: &str) -> Option<String> {
        let cat = self.key(category)?;
        let table = self.table.read().expect("prior table lock");
        let views = table.get(&cat)?;
        views
            .get(view.trim())
            .or_else(|| views.get(WILDCARD_VIEW))
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.table
            .read()
            .expect("prior table lock")
            .values()
            .map(BTreeMap::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PriorSource for PriorStore {
    fn get_prior(&self, category: &str, view: &str) -> Result<Option<String>, PriorError> {
        Ok(self.get(category, view))
    }
}
