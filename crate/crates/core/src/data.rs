//! Core record types shared by every pipeline stage.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `items.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub domain: String,
    pub embedding: Vec<f64>,
}

/// One line of `interactions.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub domain: String,
    pub ts: i64,
}

/// The item catalog across all domains.
#[derive(Clone, Debug)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
    domains: Vec<String>,
    dim: usize,
}

impl Catalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        let dim = items.first().map_or(0, |i| i.embedding.len());
        let mut index = HashMap::with_capacity(items.len());
        let mut domains = BTreeSet::new();
        for (i, it) in items.iter().enumerate() {
            if it.embedding.len() != dim {
                return Err(Error::Shape(format!(
                    "item `{}` has embedding length {}, expected {dim}",
                    it.item_id,
                    it.embedding.len()
                )));
            }
            if !it.embedding.iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!("item `{}` has a non-finite embedding", it.item_id)));
            }
            if index.insert(it.item_id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate item id `{}`", it.item_id)));
            }
            domains.insert(it.domain.clone());
        }
        Ok(Self { items, index, domains: domains.into_iter().collect(), dim })
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sorted domain labels.
    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn in_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a ItemRecord> + 'a {
        self.items.iter().filter(move |i| i.domain == domain)
    }
}
