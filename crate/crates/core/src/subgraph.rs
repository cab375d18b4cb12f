//! Induced subgraphs, BFS expansion and feature-based top-k selection.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError, FeatureVector};
use crate::store::{GraphStore, NodeId, NodeRecord, StoreError};

#[derive(Debug, Error)]
pub enum SubgraphError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("cap {cap} is smaller than the {seeds} seeds")]
    CapTooSmall { cap: usize, seeds: usize },
    #[error("k = {k} exceeds node count {node_count}")]
    KTooLarge { k: usize, node_count: u64 },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no node with external id {0:?}")]
    UnknownExternalId(String),
}

/// Set of store nodes with constant-time membership and an ascending snapshot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeSet {
    members: Vec<NodeId>,
    rank: HashMap<NodeId, u32>,
}

impl NodeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.rank.contains_key(&node)
    }

    /// Position of `node` in the ascending snapshot.
    pub fn rank(&self, node: NodeId) -> Option<u32> {
        self.rank.get(&node).copied()
    }

    /// Members in ascending order.
    pub fn as_slice(&self) -> &[NodeId] {
        &self.members
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.iter().copied()
    }

    pub fn union(&self, other: &NodeSet) -> NodeSet {
        self.iter().chain(other.iter()).collect()
    }

    pub fn is_subset(&self, other: &NodeSet) -> bool {
        self.iter().all(|n| other.contains(n))
    }

    fn validate(&self, store: &GraphStore) -> Result<(), StoreError> {
        match self.members.last() {
            Some(&max) if max as u64 >= store.node_count() => Err(StoreError::NodeOutOfRange {
                node: max,
                node_count: store.node_count(),
            }),
            _ => Ok(()),
        }
    }
}

impl FromIterator<NodeId> for NodeSet {
    fn from_iter<I: IntoIterator<Item = NodeId>>(iter: I) -> Self {
        let mut members: Vec<NodeId> = iter.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        let rank = members
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i as u32))
            .collect();
        Self { members, rank }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphOrigin {
    pub store: String,
    pub selection: String,
}

/// In-memory induced subgraph with dense local indices.
///
/// `nodes` is in ascending store-id order; `edges` holds `(u, v)` local index
/// pairs with `u < v`, sorted and free of duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Subgraph {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<(u32, u32)>,
    pub origin: SubgraphOrigin,
}

impl Subgraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> NodeSet {
        self.nodes.iter().map(|r| r.internal).collect()
    }

    pub fn local_index(&self, node: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&node, |r| r.internal).ok()
    }

    /// Edges as store-id pairs `(min, max)`.
    pub fn store_edges(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (self.nodes[u as usize].internal, self.nodes[v as usize].internal);
                (a.min(b), a.max(b))
            })
            .collect()
    }

    /// Wire form; `features` values are attached per node where present.
    pub fn to_payload(&self, features: &[&FeatureVector]) -> SubgraphPayload {
        SubgraphPayload {
            nodes: self
                .nodes
                .iter()
                .map(|r| NodePayload {
                    id: r.internal,
                    external_id: r.external_id.clone(),
                    label: r.label.clone(),
                    degree: r.degree,
                    features: features
                        .iter()
                        .filter_map(|fv| fv.get(r.internal).map(|v| (fv.name.clone(), v)))
                        .collect(),
                })
                .collect(),
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
        }
    }
}

/// JSON shape of a subgraph: nodes in local-index order, edges as local index pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphPayload {
    pub nodes: Vec<NodePayload>,
    pub edges: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePayload {
    /// Store node id; the local index is the position in `nodes`.
    pub id: NodeId,
    pub external_id: String,
    pub label: String,
    pub degree: u64,
    #[serde(default)]
    pub features: BTreeMap<String, f64>,
}

/// Induces the subgraph on `set`: every parent edge with both endpoints in the
/// set, once. Reads one adjacency slice per member through a fixed-size buffer.
///
/// For directed stores an arc in either direction yields one undirected edge.
/// Self-loops are never part of a subgraph.
pub fn induce(store: &GraphStore, set: &NodeSet) -> Result<Subgraph, SubgraphError> {
    set.validate(store)?;
    let directed = store.directed();
    let mut nodes = Vec::with_capacity(set.len());
    let mut edges = Vec::new();
    for (lu, u) in set.iter().enumerate() {
        let lu = lu as u32;
        let degree = store.for_each_neighbor_chunk(u, |chunk| {
            if directed {
                for &v in chunk {
                    if let Some(lv) = set.rank(v) {
                        if lv != lu {
                            edges.push((lu.min(lv), lu.max(lv)));
                        }
                    }
                }
            } else {
                // Undirected slices are symmetric: keep only the v > u half.
                let start = chunk.partition_point(|&v| v <= u);
                for &v in &chunk[start..] {
                    if let Some(lv) = set.rank(v) {
                        edges.push((lu, lv));
                    }
                }
            }
        })?;
        nodes.push(NodeRecord {
            internal: u,
            external_id: store.external_id(u)?.to_owned(),
            label: store.label(u)?.to_owned(),
            degree,
        });
    }
    if directed {
        edges.sort_unstable();
    }
    // Undirected edges arrive sorted by construction; duplicates only exist
    // when the store kept duplicate arcs or for directed reciprocal pairs.
    edges.dedup();
    Ok(Subgraph {
        nodes,
        edges,
        origin: SubgraphOrigin {
            store: store.path().display().to_string(),
            selection: format!("{} nodes", set.len()),
        },
    })
}

/// How a client names the nodes of a subgraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    ExternalIds {
        ids: Vec<String>,
    },
    TopK {
        feature: String,
        k: usize,
    },
    Expand {
        seeds: Vec<String>,
        hops: usize,
        cap: usize,
    },
}

impl Selection {
    pub fn resolve(&self, store: &GraphStore) -> Result<NodeSet, SubgraphError> {
        match self {
            Selection::ExternalIds { ids } => lookup_all(store, ids),
            Selection::TopK { feature, k } => select_top_k(store, feature, *k),
            Selection::Expand { seeds, hops, cap } => {
                expand(store, &lookup_all(store, seeds)?, *hops, *cap)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Selection::ExternalIds { ids } => format!("{} external ids", ids.len()),
            Selection::TopK { feature, k } => format!("top {k} by {feature}"),
            Selection::Expand { seeds, hops, cap } => {
                format!("{hops}-hop expansion of {} seeds, cap {cap}", seeds.len())
            }
        }
    }

    /// Resolves and induces in one go, recording the selection as the origin.
    pub fn induce(&self, store: &GraphStore) -> Result<Subgraph, SubgraphError> {
        let mut sub = induce(store, &self.resolve(store)?)?;
        sub.origin.selection = self.describe();
        Ok(sub)
    }
}

fn lookup_all(store: &GraphStore, ids: &[String]) -> Result<NodeSet, SubgraphError> {
    ids.iter()
        .map(|e| {
            store
                .lookup_external(e)
                .ok_or_else(|| SubgraphError::UnknownExternalId(e.clone()))
        })
        .collect()
}

/// Breadth-first expansion from `seeds` up to `hops` hops, admitting nodes
/// level by level in ascending id order until `cap` members.
pub fn expand(
    store: &GraphStore,
    seeds: &NodeSet,
    hops: usize,
    cap: usize,
) -> Result<NodeSet, SubgraphError> {
    seeds.validate(store)?;
    if cap < seeds.len() {
        return Err(SubgraphError::CapTooSmall {
            cap,
            seeds: seeds.len(),
        });
    }
    let mut admitted: BTreeSet<NodeId> = seeds.iter().collect();
    let mut frontier: Vec<NodeId> = seeds.as_slice().to_vec();
    for _ in 0..hops {
        let room = cap - admitted.len();
        if room == 0 || frontier.is_empty() {
            break;
        }
        // The `room` smallest unseen ids of the next level.
        let mut level: BTreeSet<NodeId> = BTreeSet::new();
        for &u in &frontier {
            store.for_each_neighbor_chunk(u, |chunk| {
                for &v in chunk {
                    if admitted.contains(&v) {
                        continue;
                    }
                    if level.len() == room {
                        match level.last() {
                            Some(&max) if v < max => {
                                if level.insert(v) {
                                    level.pop_last();
                                }
                            }
                            _ => {}
                        }
                    } else {
                        level.insert(v);
                    }
                }
            })?;
        }
        admitted.extend(level.iter().copied());
        frontier = level.into_iter().collect();
    }
    Ok(admitted.into_iter().collect())
}

/// The `k` nodes with the highest feature value, ties broken by ascending id.
/// `degree` is computed from the store when it has no sidecar.
pub fn select_top_k(store: &GraphStore, feature: &str, k: usize) -> Result<NodeSet, SubgraphError> {
    if k == 0 {
        return Err(SubgraphError::ZeroK);
    }
    if k as u64 > store.node_count() {
        return Err(SubgraphError::KTooLarge {
            k,
            node_count: store.node_count(),
        });
    }
    let fv = features::resolve_feature(store, feature)?;
    Ok(top_k(&fv.values, k).into_iter().collect())
}

/// Indices of the `k` largest values (descending value, then ascending index).
pub fn top_k(values: &[f64], k: usize) -> Vec<NodeId> {
    let mut ids: Vec<NodeId> = (0..values.len() as NodeId).collect();
    let cmp = |a: &NodeId, b: &NodeId| {
        values[*b as usize]
            .total_cmp(&values[*a as usize])
            .then(a.cmp(b))
    };
    let k = k.min(ids.len());
    if k == 0 {
        return Vec::new();
    }
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, cmp);
        ids.truncate(k);
    }
    ids.sort_unstable_by(cmp);
    ids
}
