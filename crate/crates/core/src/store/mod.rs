//! Disk-backed CSR graph store.
//!
//! A store is a single file holding the adjacency of a graph in compressed
//! sparse row form together with a node table and a sorted label index.
//! Opening a store loads only the header, node table and label index; every
//! adjacency query reads the byte range it needs with positioned reads, so
//! resident memory scales with the node count and not with the edge count.

mod build;
pub mod format;

use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{build_store, BuildOptions, BuildSummary, DEFAULT_RUN_CAPACITY};
use format::{normalize_label, StoreHeader, HEADER_LEN, TRAILER_LEN};

/// Dense 0-based node identifier, stable for the lifetime of a store file.
pub type NodeId = u32;

const NEIGHBOR_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed edge {content:?}")]
    MalformedLine { line: u64, content: String },
    #[error("labels file line {line}: expected `external_id<TAB>label`")]
    MalformedLabel { line: u64 },
    #[error("empty graph")]
    EmptyGraph,
    #[error("too many nodes for 32-bit ids")]
    TooManyNodes,
    #[error("input changed between build passes")]
    InputChanged,
    #[error("not a store file (bad magic)")]
    BadMagic,
    #[error("unsupported store format version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("store file is truncated")]
    Truncated,
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("node {node} out of range (node_count = {node_count})")]
    NodeOutOfRange { node: NodeId, node_count: u64 },
}

/// A node as seen by callers: internal id, source token, display label and degree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub internal: NodeId,
    pub external_id: String,
    pub label: String,
    pub degree: u64,
}

/// External ids and labels, packed into one arena.
struct NodeTable {
    arena: String,
    /// `2 * node_count + 1` boundaries: external id `i` spans
    /// `bounds[2i]..bounds[2i+1]`, its label `bounds[2i+1]..bounds[2i+2]`.
    bounds: Vec<u64>,
    /// Node ids sorted by external id, for exact lookup.
    by_external: Vec<NodeId>,
}

impl NodeTable {
    fn external_id(&self, node: NodeId) -> &str {
        let i = node as usize * 2;
        &self.arena[self.bounds[i] as usize..self.bounds[i + 1] as usize]
    }

    fn label(&self, node: NodeId) -> &str {
        let i = node as usize * 2 + 1;
        &self.arena[self.bounds[i] as usize..self.bounds[i + 1] as usize]
    }
}

struct LabelIndex {
    /// Node ids in (normalized label, id) order.
    order: Vec<NodeId>,
    arena: String,
    /// Entry `i` of `order` has normalized label `arena[bounds[i]..bounds[i+1]]`.
    bounds: Vec<u64>,
}

impl LabelIndex {
    fn key(&self, i: usize) -> &str {
        &self.arena[self.bounds[i] as usize..self.bounds[i + 1] as usize]
    }
}

/// Read-only handle on a built store. Cheap to share between threads.
pub struct GraphStore {
    path: PathBuf,
    file: File,
    header: StoreHeader,
    nodes: NodeTable,
    labels: LabelIndex,
}

impl std::fmt::Debug for GraphStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GraphStore")
            .field("path", &self.path)
            .field("header", &self.header)
            .finish()
    }
}

impl GraphStore {
    /// Opens a store, validating magic, version, section layout and checksum.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        if file_len < HEADER_LEN {
            return Err(StoreError::BadMagic);
        }
        let mut head = [0u8; HEADER_LEN as usize];
        read_exact_at(&file, &mut head, 0)?;
        let header = StoreHeader::decode(&head, file_len)?;

        verify_checksum(&file, &header)?;

        let node_table = read_section(&file, header.node_table_off, header.label_index_off)?;
        let nodes = parse_node_table(&node_table, header.node_count)?;
        drop(node_table);
        let label_bytes = read_section(&file, header.label_index_off, header.trailer_off)?;
        let labels = parse_label_index(&label_bytes, header.node_count)?;

        Ok(Self {
            path,
            file,
            header,
            nodes,
            labels,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn node_count(&self) -> u64 {
        self.header.node_count
    }

    pub fn edge_count(&self) -> u64 {
        self.header.edge_count
    }

    pub fn directed(&self) -> bool {
        self.header.directed()
    }

    fn check(&self, node: NodeId) -> Result<(), StoreError> {
        if (node as u64) < self.header.node_count {
            Ok(())
        } else {
            Err(StoreError::NodeOutOfRange {
                node,
                node_count: self.header.node_count,
            })
        }
    }

    /// Start and end position of the node's slice in the neighbor array.
    fn slice_bounds(&self, node: NodeId) -> Result<(u64, u64), StoreError> {
        self.check(node)?;
        let mut buf = [0u8; 16];
        read_exact_at(&self.file, &mut buf, self.header.offsets_off + node as u64 * 8)?;
        let start = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let end = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        if start > end || end > self.header.neighbor_count {
            return Err(StoreError::Corrupt(format!("bad offsets for node {node}")));
        }
        Ok((start, end))
    }

    pub fn degree(&self, node: NodeId) -> Result<u64, StoreError> {
        let (start, end) = self.slice_bounds(node)?;
        Ok(end - start)
    }

    /// Sorted neighbor slice of `node`.
    pub fn neighbors(&self, node: NodeId) -> Result<Vec<NodeId>, StoreError> {
        let mut out = Vec::new();
        self.for_each_neighbor_chunk(node, |chunk| out.extend_from_slice(chunk))?;
        Ok(out)
    }

    /// Streams the neighbor slice of `node` through a fixed-size buffer, so the
    /// cost in memory is independent of the node's degree. Returns the degree.
    pub fn for_each_neighbor_chunk<F>(&self, node: NodeId, mut f: F) -> Result<u64, StoreError>
    where
        F: FnMut(&[NodeId]),
    {
        let (start, end) = self.slice_bounds(node)?;
        let mut raw = [0u8; NEIGHBOR_CHUNK * 4];
        let mut ids = [0 as NodeId; NEIGHBOR_CHUNK];
        let mut at = start;
        while at < end {
            let n = ((end - at) as usize).min(NEIGHBOR_CHUNK);
            let bytes = &mut raw[..n * 4];
            read_exact_at(&self.file, bytes, self.header.adjacency_off + at * 4)?;
            for (dst, src) in ids[..n].iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = u32::from_le_bytes(src.try_into().unwrap());
            }
            f(&ids[..n]);
            at += n as u64;
        }
        Ok(end - start)
    }

    pub fn external_id(&self, node: NodeId) -> Result<&str, StoreError> {
        self.check(node)?;
        Ok(self.nodes.external_id(node))
    }

    pub fn label(&self, node: NodeId) -> Result<&str, StoreError> {
        self.check(node)?;
        Ok(self.nodes.label(node))
    }

    pub fn record(&self, node: NodeId) -> Result<NodeRecord, StoreError> {
        let degree = self.degree(node)?;
        Ok(NodeRecord {
            internal: node,
            external_id: self.nodes.external_id(node).to_owned(),
            label: self.nodes.label(node).to_owned(),
            degree,
        })
    }

    /// Exact lookup of a source-file token.
    pub fn lookup_external(&self, external_id: &str) -> Option<NodeId> {
        let idx = &self.nodes.by_external;
        idx.binary_search_by(|&n| self.nodes.external_id(n).cmp(external_id))
            .ok()
            .map(|i| idx[i])
    }

    /// Case-insensitive prefix search in normalized-label order.
    pub fn search_labels(&self, query: &str, limit: usize) -> Vec<(NodeId, &str)> {
        let prefix = normalize_label(query);
        let start = partition_point(self.labels.order.len(), |i| {
            self.labels.key(i) < prefix.as_str()
        });
        (start..self.labels.order.len())
            .take_while(|&i| self.labels.key(i).starts_with(prefix.as_str()))
            .take(limit)
            .map(|i| {
                let node = self.labels.order[i];
                (node, self.nodes.label(node))
            })
            .collect()
    }

    /// Visits `(node, degree)` for every node by streaming the offsets section.
    pub fn for_each_degree<F>(&self, mut f: F) -> Result<(), StoreError>
    where
        F: FnMut(NodeId, u64),
    {
        let mut offsets = BufReader::with_capacity(
            1 << 16,
            SectionReader::new(&self.file, self.header.offsets_off),
        );
        let mut prev = read_u64(&mut offsets)?;
        for node in 0..self.header.node_count {
            let end = read_u64(&mut offsets)?;
            if end < prev {
                return Err(StoreError::Corrupt("offsets decrease".into()));
            }
            f(node as NodeId, end - prev);
            prev = end;
        }
        Ok(())
    }

    /// Sequential scan of the whole adjacency, in ascending node order.
    pub fn scan(&self) -> AdjacencyScan<'_> {
        AdjacencyScan {
            offsets: BufReader::with_capacity(
                1 << 16,
                SectionReader::new(&self.file, self.header.offsets_off),
            ),
            neighbors: BufReader::with_capacity(
                1 << 20,
                SectionReader::new(&self.file, self.header.adjacency_off),
            ),
            node_count: self.header.node_count,
            next: 0,
            prev_offset: None,
        }
    }
}

/// First index in `0..len` for which `pred` is false, assuming `pred` is
/// true on a prefix.
fn partition_point(len: usize, mut pred: impl FnMut(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, len);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Streaming pass over a store's adjacency. Holds only fixed-size buffers.
pub struct AdjacencyScan<'a> {
    offsets: BufReader<SectionReader<'a>>,
    neighbors: BufReader<SectionReader<'a>>,
    node_count: u64,
    next: u64,
    prev_offset: Option<u64>,
}

impl AdjacencyScan<'_> {
    /// Fills `buf` with the next node's neighbors and returns its id, or
    /// `None` once every node has been visited.
    pub fn next_into(&mut self, buf: &mut Vec<NodeId>) -> Result<Option<NodeId>, StoreError> {
        if self.next >= self.node_count {
            return Ok(None);
        }
        let start = match self.prev_offset {
            Some(o) => o,
            None => read_u64(&mut self.offsets)?,
        };
        let end = read_u64(&mut self.offsets)?;
        if end < start {
            return Err(StoreError::Corrupt("offsets decrease".into()));
        }
        self.prev_offset = Some(end);
        buf.clear();
        let mut word = [0u8; 4];
        for _ in start..end {
            self.neighbors.read_exact(&mut word)?;
            buf.push(u32::from_le_bytes(word));
        }
        let node = self.next as NodeId;
        self.next += 1;
        Ok(Some(node))
    }
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// `Read` over a file using positioned reads with a private cursor, so many
/// readers can share one handle.
struct SectionReader<'a> {
    file: &'a File,
    pos: u64,
}

impl<'a> SectionReader<'a> {
    fn new(file: &'a File, pos: u64) -> Self {
        Self { file, pos }
    }
}

impl Read for SectionReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = read_at(self.file, buf, self.pos)?;
        self.pos += n as u64;
        Ok(n)
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<usize> {
    std::os::unix::fs::FileExt::read_at(file, buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<usize> {
    std::os::windows::fs::FileExt::seek_read(file, buf, offset)
}

fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> io::Result<()> {
    while !buf.is_empty() {
        match read_at(file, buf, offset) {
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn verify_checksum(file: &File, header: &StoreHeader) -> Result<(), StoreError> {
    let mut hasher = xxhash_rust::xxh3::Xxh3::new();
    let mut reader = SectionReader::new(file, 0);
    let mut buf = vec![0u8; 1 << 20];
    let mut remaining = header.trailer_off;
    while remaining > 0 {
        let want = remaining.min(buf.len() as u64) as usize;
        let n = reader.read(&mut buf[..want])?;
        if n == 0 {
            return Err(StoreError::Truncated);
        }
        hasher.update(&buf[..n]);
        remaining -= n as u64;
    }
    let mut trailer = [0u8; TRAILER_LEN as usize];
    read_exact_at(file, &mut trailer, header.trailer_off)?;
    let stored = u64::from_le_bytes(trailer);
    let computed = hasher.digest();
    if stored != computed {
        return Err(StoreError::ChecksumMismatch { stored, computed });
    }
    Ok(())
}

fn read_section(file: &File, start: u64, end: u64) -> Result<Vec<u8>, StoreError> {
    let mut buf = vec![0u8; (end - start) as usize];
    read_exact_at(file, &mut buf, start)?;
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32, StoreError> {
        let b = self
            .bytes
            .get(self.at..self.at + 4)
            .ok_or_else(|| StoreError::Corrupt("section ends mid-record".into()))?;
        self.at += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str, StoreError> {
        let len = self.u32()? as usize;
        let b = self
            .bytes
            .get(self.at..self.at + len)
            .ok_or_else(|| StoreError::Corrupt("section ends mid-string".into()))?;
        self.at += len;
        std::str::from_utf8(b).map_err(|_| StoreError::Corrupt("invalid UTF-8".into()))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn parse_node_table(bytes: &[u8], node_count: u64) -> Result<NodeTable, StoreError> {
    let n = node_count as usize;
    let mut cur = Cursor { bytes, at: 0 };
    let mut arena = String::with_capacity(bytes.len().saturating_sub(8 * n));
    let mut bounds = Vec::with_capacity(2 * n + 1);
    bounds.push(0);
    for _ in 0..n {
        arena.push_str(cur.str()?);
        bounds.push(arena.len() as u64);
        arena.push_str(cur.str()?);
        bounds.push(arena.len() as u64);
    }
    if !cur.done() {
        return Err(StoreError::Corrupt("trailing bytes in node table".into()));
    }
    let mut table = NodeTable {
        arena,
        bounds,
        by_external: (0..n as NodeId).collect(),
    };
    let mut by_external = std::mem::take(&mut table.by_external);
    by_external.sort_unstable_by(|&a, &b| table.external_id(a).cmp(table.external_id(b)));
    if by_external
        .windows(2)
        .any(|w| table.external_id(w[0]) == table.external_id(w[1]))
    {
        return Err(StoreError::Corrupt("duplicate external id".into()));
    }
    table.by_external = by_external;
    Ok(table)
}

fn parse_label_index(bytes: &[u8], node_count: u64) -> Result<LabelIndex, StoreError> {
    let n = node_count as usize;
    let mut cur = Cursor { bytes, at: 0 };
    let mut order = Vec::with_capacity(n);
    let mut arena = String::with_capacity(bytes.len().saturating_sub(8 * n));
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(0);
    for _ in 0..n {
        let node = cur.u32()?;
        if node as u64 >= node_count {
            return Err(StoreError::Corrupt("label index references unknown node".into()));
        }
        order.push(node);
        arena.push_str(cur.str()?);
        bounds.push(arena.len() as u64);
    }
    if !cur.done() {
        return Err(StoreError::Corrupt("trailing bytes in label index".into()));
    }
    Ok(LabelIndex {
        order,
        arena,
        bounds,
    })
}
