//! On-disk layout of a store file.
//!
//! ```text
//! [header: 72 bytes]
//! [offsets:     (node_count + 1) x u64]
//! [neighbors:   neighbor_count x u32]
//! [node table:  per node: u32 len, external_id bytes, u32 len, label bytes]
//! [label index: per entry: u32 node id, u32 len, normalized label bytes]
//! [trailer:     u64 xxh3 digest of every byte before the trailer]
//! ```
//!
//! All integers are little-endian.

use std::io::{self, Write};

use super::StoreError;

pub const MAGIC: [u8; 4] = *b"CARN";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 72;
pub const TRAILER_LEN: u64 = 8;

pub const FLAG_DIRECTED: u16 = 1 << 0;
pub const FLAG_DEDUPED: u16 = 1 << 1;
pub const FLAG_SELF_LOOPS: u16 = 1 << 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u16,
    pub flags: u16,
    pub node_count: u64,
    /// Undirected edges are counted once.
    pub edge_count: u64,
    /// Length of the flat neighbor array.
    pub neighbor_count: u64,
    pub offsets_off: u64,
    pub adjacency_off: u64,
    pub node_table_off: u64,
    pub label_index_off: u64,
    pub trailer_off: u64,
}

impl StoreHeader {
    pub fn directed(&self) -> bool {
        self.flags & FLAG_DIRECTED != 0
    }

    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut buf = [0u8; HEADER_LEN as usize];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..6].copy_from_slice(&self.version.to_le_bytes());
        buf[6..8].copy_from_slice(&self.flags.to_le_bytes());
        let fields = [
            self.node_count,
            self.edge_count,
            self.neighbor_count,
            self.offsets_off,
            self.adjacency_off,
            self.node_table_off,
            self.label_index_off,
            self.trailer_off,
        ];
        for (i, v) in fields.iter().enumerate() {
            let at = 8 + i * 8;
            buf[at..at + 8].copy_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Decodes and validates a header against the length of the file it came from.
    pub fn decode(buf: &[u8], file_len: u64) -> Result<Self, StoreError> {
        if buf.len() < HEADER_LEN as usize || buf[0..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let flags = u16::from_le_bytes([buf[6], buf[7]]);
        let field = |i: usize| {
            let at = 8 + i * 8;
            u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
        };
        let header = StoreHeader {
            version,
            flags,
            node_count: field(0),
            edge_count: field(1),
            neighbor_count: field(2),
            offsets_off: field(3),
            adjacency_off: field(4),
            node_table_off: field(5),
            label_index_off: field(6),
            trailer_off: field(7),
        };
        header.validate(file_len)?;
        Ok(header)
    }

    fn validate(&self, file_len: u64) -> Result<(), StoreError> {
        let sections = [
            HEADER_LEN,
            self.offsets_off,
            self.adjacency_off,
            self.node_table_off,
            self.label_index_off,
            self.trailer_off,
        ];
        if sections.windows(2).any(|w| w[0] > w[1]) {
            return Err(StoreError::Corrupt("section offsets are not monotonic".into()));
        }
        let expected_len = self.trailer_off.checked_add(TRAILER_LEN);
        if expected_len != Some(file_len) {
            return Err(StoreError::Truncated);
        }
        let offsets_len = self
            .node_count
            .checked_add(1)
            .and_then(|n| n.checked_mul(8));
        if offsets_len != Some(self.adjacency_off - self.offsets_off) {
            return Err(StoreError::Corrupt("offsets section has the wrong size".into()));
        }
        if self.neighbor_count.checked_mul(4) != Some(self.node_table_off - self.adjacency_off) {
            return Err(StoreError::Corrupt("adjacency section has the wrong size".into()));
        }
        if self.node_count > u32::MAX as u64 {
            return Err(StoreError::Corrupt("node count exceeds 32-bit ids".into()));
        }
        Ok(())
    }
}

/// Writer adapter that hashes everything passing through it and tracks the byte count.
pub struct DigestWriter<W> {
    inner: W,
    hasher: xxhash_rust::xxh3::Xxh3,
    written: u64,
}

impl<W: Write> DigestWriter<W> {
    pub fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: xxhash_rust::xxh3::Xxh3::new(),
            written: 0,
        }
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn digest(&self) -> u64 {
        self.hasher.digest()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for DigestWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

/// Unicode-aware lowercase used for the label index and for search queries.
pub fn normalize_label(label: &str) -> String {
    label.to_lowercase()
}
