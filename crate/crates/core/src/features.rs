//! Per-node measures computed with streaming passes over a store, persisted
//! as `<store>.<name>.f64` sidecars next to the store file.
//!
//! Sidecar layout: 8-byte magic `CARNFEAT`, `u64` count, then `count`
//! little-endian `f64` values indexed by node id.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::store::format::{StoreHeader, HEADER_LEN};
use crate::store::{GraphStore, NodeId, StoreError};

pub const SIDECAR_MAGIC: [u8; 8] = *b"CARNFEAT";
pub const SIDECAR_EXT: &str = "f64";
/// Always available: derived from the adjacency offsets when no sidecar exists.
pub const DEGREE: &str = "degree";
pub const PAGERANK: &str = "pagerank";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("damping must lie in (0, 1), got {0}")]
    Damping(f64),
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("max_iters must be at least 1")]
    Iterations,
    #[error("feature name {0:?} must be non-empty and use only [A-Za-z0-9_-]")]
    InvalidName(String),
    #[error("no sidecar for feature {name:?} at {path}")]
    MissingSidecar { name: String, path: PathBuf },
    #[error("feature has {actual} values but the store has {expected} nodes")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("sidecar {0} is not a feature file")]
    BadSidecar(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankMeta {
    pub damping: f64,
    pub iterations: usize,
    /// L1 change of the final iteration.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub name: String,
    pub values: Vec<f64>,
    pub pagerank: Option<PageRankMeta>,
}

impl FeatureVector {
    pub fn get(&self, node: NodeId) -> Option<f64> {
        self.values.get(node as usize).copied()
    }
}

pub fn compute_degree(store: &GraphStore) -> Result<FeatureVector, StoreError> {
    let mut values = Vec::with_capacity(store.node_count() as usize);
    store.for_each_degree(|_, d| values.push(d as f64))?;
    Ok(FeatureVector {
        name: DEGREE.to_owned(),
        values,
        pagerank: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankParams {
    pub damping: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PageRankParams {
    fn default() -> Self {
        Self {
            damping: 0.85,
            max_iters: 100,
            tol: 1e-9,
        }
    }
}

impl PageRankParams {
    fn validate(&self) -> Result<(), FeatureError> {
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(FeatureError::Damping(self.damping));
        }
        if !(self.tol > 0.0) {
            return Err(FeatureError::Tolerance(self.tol));
        }
        if self.max_iters == 0 {
            return Err(FeatureError::Iterations);
        }
        Ok(())
    }
}

pub fn compute_pagerank(
    store: &GraphStore,
    params: &PageRankParams,
) -> Result<FeatureVector, FeatureError> {
    compute_pagerank_observed(store, params, |_, _| {})
}

/// Power-iteration PageRank, one sequential adjacency pass per iteration.
///
/// `r' = (1 - d)/N + d * (P^T r + dangling/N)` where `P` row-normalizes by
/// out-degree and `dangling` is the rank held by nodes with no out-arcs.
/// Undirected stores rank every edge as two arcs. Contributions are summed in
/// ascending node order, so results are bitwise reproducible.
///
/// `observer(iteration, ranks)` is called after every iteration.
pub fn compute_pagerank_observed<F>(
    store: &GraphStore,
    params: &PageRankParams,
    mut observer: F,
) -> Result<FeatureVector, FeatureError>
where
    F: FnMut(usize, &[f64]),
{
    params.validate()?;
    let n = store.node_count() as usize;
    let d = params.damping;
    let inv_n = 1.0 / n as f64;
    let mut rank = vec![inv_n; n];
    let mut next = vec![0.0f64; n];
    let mut nbrs = Vec::new();
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    while iterations < params.max_iters {
        next.fill(0.0);
        let mut dangling = 0.0;
        let mut scan = store.scan();
        while let Some(u) = scan.next_into(&mut nbrs)? {
            let r = rank[u as usize];
            if nbrs.is_empty() {
                dangling += r;
            } else {
                let share = r / nbrs.len() as f64;
                for &v in &nbrs {
                    next[v as usize] += share;
                }
            }
        }
        let base = (1.0 - d) * inv_n + d * dangling * inv_n;
        residual = 0.0;
        for (nv, &old) in next.iter_mut().zip(&rank) {
            *nv = d * *nv + base;
            residual += (*nv - old).abs();
        }
        std::mem::swap(&mut rank, &mut next);
        iterations += 1;
        observer(iterations, &rank);
        if residual < params.tol {
            break;
        }
    }

    Ok(FeatureVector {
        name: PAGERANK.to_owned(),
        values: rank,
        pagerank: Some(PageRankMeta {
            damping: d,
            iterations,
            residual,
        }),
    })
}

fn check_name(name: &str) -> Result<(), FeatureError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(FeatureError::InvalidName(name.to_owned()))
    }
}

pub fn sidecar_path(store_path: &Path, name: &str) -> PathBuf {
    let mut s = store_path.as_os_str().to_owned();
    s.push(format!(".{name}.{SIDECAR_EXT}"));
    PathBuf::from(s)
}

fn store_node_count(store_path: &Path) -> Result<u64, FeatureError> {
    let mut f = File::open(store_path)?;
    let len = f.metadata()?.len();
    let mut head = [0u8; HEADER_LEN as usize];
    f.read_exact(&mut head).map_err(|_| StoreError::BadMagic)?;
    Ok(StoreHeader::decode(&head, len)?.node_count)
}

pub fn save_feature(store_path: &Path, fv: &FeatureVector) -> Result<PathBuf, FeatureError> {
    check_name(&fv.name)?;
    let expected = store_node_count(store_path)?;
    if fv.values.len() as u64 != expected {
        return Err(FeatureError::LengthMismatch {
            expected,
            actual: fv.values.len() as u64,
        });
    }
    let path = sidecar_path(store_path, &fv.name);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let staging = tempfile::Builder::new()
        .prefix(".feature")
        .tempfile_in(dir.unwrap_or(Path::new(".")))?;
    {
        let mut w = BufWriter::new(staging.as_file());
        w.write_all(&SIDECAR_MAGIC)?;
        w.write_all(&(fv.values.len() as u64).to_le_bytes())?;
        for v in &fv.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    staging.persist(&path).map_err(|e| e.error)?;
    Ok(path)
}

pub fn load_feature(store_path: &Path, name: &str) -> Result<FeatureVector, FeatureError> {
    check_name(name)?;
    let path = sidecar_path(store_path, name);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(FeatureError::MissingSidecar {
                name: name.to_owned(),
                path,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| FeatureError::BadSidecar(path.clone()))?;
    if head[..8] != SIDECAR_MAGIC {
        return Err(FeatureError::BadSidecar(path));
    }
    let count = u64::from_le_bytes(head[8..16].try_into().unwrap());
    if count.checked_mul(8).and_then(|b| b.checked_add(16)) != Some(file_len) {
        return Err(FeatureError::BadSidecar(path));
    }
    let expected = store_node_count(store_path)?;
    if count != expected {
        return Err(FeatureError::LengthMismatch {
            expected,
            actual: count,
        });
    }
    let mut values = Vec::with_capacity(count as usize);
    let mut word = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut word)?;
        values.push(f64::from_le_bytes(word));
    }
    Ok(FeatureVector {
        name: name.to_owned(),
        values,
        pagerank: None,
    })
}

/// Loads a sidecar, falling back to computing degree from the store.
pub fn resolve_feature(store: &GraphStore, name: &str) -> Result<FeatureVector, FeatureError> {
    match load_feature(store.path(), name) {
        Err(FeatureError::MissingSidecar { .. }) if name == DEGREE => Ok(compute_degree(store)?),
        other => other,
    }
}

/// Feature names available for a store: `degree` first, then sidecars in name order.
pub fn list_features(store_path: &Path) -> io::Result<Vec<String>> {
    let file_name = match store_path.file_name().and_then(|f| f.to_str()) {
        Some(f) => format!("{f}."),
        None => return Ok(vec![DEGREE.to_owned()]),
    };
    let dir = match store_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let suffix = format!(".{SIDECAR_EXT}");
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let Some(fname) = entry.file_name().to_str().map(str::to_owned) else {
            continue;
        };
        if let Some(name) = fname
            .strip_prefix(&file_name)
            .and_then(|rest| rest.strip_suffix(&suffix))
        {
            if check_name(name).is_ok() && name != DEGREE {
                names.push(name.to_owned());
            }
        }
    }
    names.sort();
    names.insert(0, DEGREE.to_owned());
    Ok(names)
}
