use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use nebula_core::features::{self, FeatureVector};
use nebula_core::{GraphStore, Subgraph, SubgraphPayload};
use serde::{Deserialize, Serialize};

use crate::config::StoreEntry;
use crate::error::{ApiError, ServeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: String,
    pub node_count: u64,
    pub edge_count: u64,
    pub features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dataset_id: String,
    pub node_count: u64,
    pub edge_count: u64,
    pub neighbor_count: u64,
    pub directed: bool,
    pub features: Vec<String>,
}

/// An opened store plus lazily loaded feature vectors.
pub struct Dataset {
    pub id: String,
    pub store: GraphStore,
    features: Vec<String>,
    loaded: Mutex<HashMap<String, Arc<FeatureVector>>>,
}

impl Dataset {
    pub fn open(entry: &StoreEntry) -> Result<Self, ServeError> {
        let store = GraphStore::open(&entry.path).map_err(|source| ServeError::Store {
            path: entry.path.clone(),
            source,
        })?;
        let features = features::list_features(&entry.path)?;
        Ok(Self {
            id: entry.dataset_id(),
            store,
            features,
            loaded: Mutex::new(HashMap::new()),
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.features
    }

    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            dataset_id: self.id.clone(),
            node_count: self.store.node_count(),
            edge_count: self.store.edge_count(),
            features: self.features.clone(),
        }
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            dataset_id: self.id.clone(),
            node_count: self.store.node_count(),
            edge_count: self.store.edge_count(),
            neighbor_count: self.store.header().neighbor_count,
            directed: self.store.directed(),
            features: self.features.clone(),
        }
    }

    pub fn feature(&self, name: &str) -> Result<Arc<FeatureVector>, ApiError> {
        if let Some(fv) = self.loaded.lock().unwrap().get(name) {
            return Ok(fv.clone());
        }
        let fv = Arc::new(features::resolve_feature(&self.store, name)?);
        self.loaded
            .lock()
            .unwrap()
            .insert(name.to_owned(), fv.clone());
        Ok(fv)
    }

    /// Payload carrying every listed feature.
    pub fn payload(&self, sub: &Subgraph) -> Result<SubgraphPayload, ApiError> {
        let vectors = self
            .features
            .iter()
            .map(|n| self.feature(n))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&FeatureVector> = vectors.iter().map(|v| v.as_ref()).collect();
        Ok(sub.to_payload(&refs))
    }
}

#[derive(Default)]
pub struct Registry {
    datasets: BTreeMap<String, Arc<Dataset>>,
}

impl Registry {
    pub fn open(entries: &[StoreEntry]) -> Result<Self, ServeError> {
        let mut datasets = BTreeMap::new();
        for e in entries {
            let ds = Dataset::open(e)?;
            datasets.insert(ds.id.clone(), Arc::new(ds));
        }
        Ok(Self { datasets })
    }

    pub fn get(&self, id: &str) -> Result<&Arc<Dataset>, ApiError> {
        self.datasets
            .get(id)
            .ok_or_else(|| ApiError::unknown_dataset(id))
    }

    /// Ordered by dataset id.
    pub fn list(&self) -> Vec<DatasetInfo> {
        self.datasets.values().map(|d| d.info()).collect()
    }
}
