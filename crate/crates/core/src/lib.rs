//! Out-of-core graph exploration engine: a disk-backed CSR store, induced
//! subgraph queries, streaming node features and an incremental
//! force-directed layout.

pub mod features;
pub mod layout;
pub mod store;
pub mod subgraph;
pub mod synth;

pub use features::{FeatureError, FeatureVector, PageRankParams};
pub use layout::{Area, LayoutError, LayoutState, StepStats, Vec2};
pub use store::{GraphStore, NodeId, NodeRecord, StoreError};
pub use subgraph::{NodeSet, Selection, Subgraph, SubgraphError, SubgraphPayload};
