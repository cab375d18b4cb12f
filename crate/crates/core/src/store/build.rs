//! Two-pass streaming store builder.
//!
//! Pass 1 assigns dense ids to external tokens in order of first appearance.
//! Pass 2 re-reads the edge list, maps tokens to ids and spills arcs into
//! fixed-size sorted runs on disk. The runs are k-way merged into the final
//! neighbor array, so edges are never held in memory beyond one run buffer.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use indexmap::IndexSet;

use super::format::{
    normalize_label, write_str, DigestWriter, StoreHeader, FLAG_DEDUPED, FLAG_DIRECTED,
    FLAG_SELF_LOOPS, FORMAT_VERSION, HEADER_LEN,
};
use super::{NodeId, StoreError};

/// Arcs per sorted run (8 MiB of packed `u64`).
pub const DEFAULT_RUN_CAPACITY: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub directed: bool,
    pub dedupe: bool,
    pub drop_self_loops: bool,
    /// Optional `external_id<TAB>label` file.
    pub labels_file: Option<PathBuf>,
    pub run_capacity: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            directed: false,
            dedupe: true,
            drop_self_loops: true,
            labels_file: None,
            run_capacity: DEFAULT_RUN_CAPACITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildSummary {
    pub path: PathBuf,
    pub node_count: u64,
    pub edge_count: u64,
    pub neighbor_count: u64,
    pub self_loops_dropped: u64,
    pub runs: usize,
    pub elapsed: Duration,
}

/// Builds a store file at `out` from a whitespace-separated edge list.
pub fn build_store(
    edge_list: &Path,
    out: &Path,
    opts: &BuildOptions,
) -> Result<BuildSummary, StoreError> {
    let started = Instant::now();
    let ids = assign_ids(edge_list)?;
    if ids.is_empty() {
        return Err(StoreError::EmptyGraph);
    }
    let node_count = ids.len();

    let out_dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let scratch = tempfile::Builder::new()
        .prefix(".store-build")
        .tempdir_in(&out_dir)?;

    let mut runs = RunSpiller::new(scratch.path(), opts.run_capacity.max(2), opts.dedupe);
    let mut self_loops_dropped = 0u64;
    for_each_edge(edge_list, |_, src, dst| {
        let u = ids.get_index_of(src).ok_or(StoreError::InputChanged)? as u64;
        let v = ids.get_index_of(dst).ok_or(StoreError::InputChanged)? as u64;
        if u == v {
            if opts.drop_self_loops {
                self_loops_dropped += 1;
            } else {
                runs.push(u << 32 | v)?;
            }
            return Ok(());
        }
        runs.push(u << 32 | v)?;
        if !opts.directed {
            runs.push(v << 32 | u)?;
        }
        Ok(())
    })?;
    let run_count = runs.finish()?;

    let labels = match &opts.labels_file {
        Some(path) => read_labels(path, &ids)?,
        None => Vec::new(),
    };

    // Merge runs into a flat neighbor file, counting slice lengths per node.
    let neighbors_path = scratch.path().join("neighbors.bin");
    let mut degrees = vec![0u64; node_count];
    let mut self_arcs = 0u64;
    let mut arcs = 0u64;
    {
        let mut w = BufWriter::with_capacity(1 << 20, File::create(&neighbors_path)?);
        let mut last = None;
        runs.merge(|arc| {
            if opts.dedupe && last == Some(arc) {
                return Ok(());
            }
            last = Some(arc);
            let (u, v) = ((arc >> 32) as usize, arc as u32);
            degrees[u] += 1;
            arcs += 1;
            if u as u32 == v {
                self_arcs += 1;
            }
            w.write_all(&v.to_le_bytes())
        })?;
        w.flush()?;
    }
    let edge_count = if opts.directed {
        arcs
    } else {
        (arcs - self_arcs) / 2 + self_arcs
    };

    let label_of = |i: usize| -> &str {
        labels
            .get(i)
            .and_then(|l| l.as_deref())
            .unwrap_or(&ids[i])
    };

    let mut label_order: Vec<(Box<str>, NodeId)> = (0..node_count)
        .map(|i| (normalize_label(label_of(i)).into_boxed_str(), i as NodeId))
        .collect();
    label_order.sort_unstable();

    let node_table_len: u64 = (0..node_count)
        .map(|i| 8 + ids[i].len() as u64 + label_of(i).len() as u64)
        .sum();
    let label_index_len: u64 = label_order.iter().map(|(k, _)| 8 + k.len() as u64).sum();

    let offsets_off = HEADER_LEN;
    let adjacency_off = offsets_off + (node_count as u64 + 1) * 8;
    let node_table_off = adjacency_off + arcs * 4;
    let label_index_off = node_table_off + node_table_len;
    let trailer_off = label_index_off + label_index_len;

    let mut flags = 0;
    if opts.directed {
        flags |= FLAG_DIRECTED;
    }
    if opts.dedupe {
        flags |= FLAG_DEDUPED;
    }
    if !opts.drop_self_loops {
        flags |= FLAG_SELF_LOOPS;
    }
    let header = StoreHeader {
        version: FORMAT_VERSION,
        flags,
        node_count: node_count as u64,
        edge_count,
        neighbor_count: arcs,
        offsets_off,
        adjacency_off,
        node_table_off,
        label_index_off,
        trailer_off,
    };

    let staging = tempfile::Builder::new()
        .prefix(".store-out")
        .tempfile_in(&out_dir)?;
    {
        let mut w = DigestWriter::new(BufWriter::with_capacity(1 << 20, staging.as_file()));
        w.write_all(&header.encode())?;

        let mut acc = 0u64;
        w.write_all(&acc.to_le_bytes())?;
        for d in &degrees {
            acc += d;
            w.write_all(&acc.to_le_bytes())?;
        }
        drop(degrees);

        io::copy(
            &mut BufReader::with_capacity(1 << 20, File::open(&neighbors_path)?),
            &mut w,
        )?;

        for i in 0..node_count {
            let ext = &ids[i];
            write_str(&mut w, ext)?;
            write_str(&mut w, label_of(i))?;
        }
        for (key, node) in &label_order {
            w.write_all(&node.to_le_bytes())?;
            write_str(&mut w, key)?;
        }
        debug_assert_eq!(w.written(), trailer_off);
        let digest = w.digest();
        let mut inner = w.into_inner();
        inner.write_all(&digest.to_le_bytes())?;
        inner.flush()?;
    }
    staging.as_file().sync_all()?;
    staging
        .persist(out)
        .map_err(|e| StoreError::Io(e.error))?;

    Ok(BuildSummary {
        path: out.to_path_buf(),
        node_count: node_count as u64,
        edge_count,
        neighbor_count: arcs,
        self_loops_dropped,
        runs: run_count,
        elapsed: started.elapsed(),
    })
}

fn assign_ids(edge_list: &Path) -> Result<IndexSet<Box<str>>, StoreError> {
    let mut ids: IndexSet<Box<str>> = IndexSet::new();
    for_each_edge(edge_list, |_, src, dst| {
        for tok in [src, dst] {
            if !ids.contains(tok) {
                ids.insert(tok.into());
            }
        }
        Ok(())
    })?;
    if ids.len() as u64 > u32::MAX as u64 {
        return Err(StoreError::TooManyNodes);
    }
    Ok(ids)
}

/// Calls `f(line_no, src, dst)` for every edge line; `#` lines and blank
/// lines are skipped.
fn for_each_edge<F>(path: &Path, mut f: F) -> Result<(), StoreError>
where
    F: FnMut(u64, &str, &str) -> Result<(), StoreError>,
{
    let mut reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut line = String::new();
    let mut line_no = 0u64;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        line_no += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        match (toks.next(), toks.next(), toks.next()) {
            (Some(src), Some(dst), None) => f(line_no, src, dst)?,
            _ => {
                return Err(StoreError::MalformedLine {
                    line: line_no,
                    content: trimmed.to_owned(),
                })
            }
        }
    }
}

fn read_labels(path: &Path, ids: &IndexSet<Box<str>>) -> Result<Vec<Option<Box<str>>>, StoreError> {
    let mut labels = vec![None; ids.len()];
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (ext, label) = line
            .split_once('\t')
            .ok_or(StoreError::MalformedLabel { line: i as u64 + 1 })?;
        // Labels for tokens absent from the edge list are ignored.
        if let Some(idx) = ids.get_index_of(ext) {
            labels[idx] = Some(label.into());
        }
    }
    Ok(labels)
}

/// Buffers packed `(src << 32 | dst)` arcs and spills them as sorted runs.
struct RunSpiller {
    dir: PathBuf,
    buf: Vec<u64>,
    capacity: usize,
    dedupe: bool,
    runs: Vec<PathBuf>,
}

impl RunSpiller {
    fn new(dir: &Path, capacity: usize, dedupe: bool) -> Self {
        Self {
            dir: dir.to_path_buf(),
            buf: Vec::with_capacity(capacity),
            capacity,
            dedupe,
            runs: Vec::new(),
        }
    }

    fn push(&mut self, arc: u64) -> Result<(), StoreError> {
        self.buf.push(arc);
        if self.buf.len() == self.capacity {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<(), StoreError> {
        self.buf.sort_unstable();
        if self.dedupe {
            self.buf.dedup();
        }
        let path = self.dir.join(format!("run-{:05}.bin", self.runs.len()));
        let mut w = BufWriter::with_capacity(1 << 16, File::create(&path)?);
        for arc in &self.buf {
            w.write_all(&arc.to_le_bytes())?;
        }
        w.flush()?;
        self.runs.push(path);
        self.buf.clear();
        Ok(())
    }

    fn finish(&mut self) -> Result<usize, StoreError> {
        if !self.buf.is_empty() {
            self.spill()?;
        }
        self.buf = Vec::new();
        Ok(self.runs.len())
    }

    /// Visits every spilled arc in ascending order.
    fn merge<F>(&self, mut f: F) -> Result<(), StoreError>
    where
        F: FnMut(u64) -> io::Result<()>,
    {
        let mut readers = self
            .runs
            .iter()
            .map(|p| Ok(BufReader::with_capacity(1 << 16, File::open(p)?)))
            .collect::<io::Result<Vec<_>>>()?;
        let mut heap = BinaryHeap::with_capacity(readers.len());
        for (i, r) in readers.iter_mut().enumerate() {
            if let Some(arc) = next_arc(r)? {
                heap.push(Reverse((arc, i)));
            }
        }
        while let Some(Reverse((arc, i))) = heap.pop() {
            f(arc)?;
            if let Some(next) = next_arc(&mut readers[i])? {
                heap.push(Reverse((next, i)));
            }
        }
        for p in &self.runs {
            fs::remove_file(p)?;
        }
        Ok(())
    }
}

fn next_arc<R: Read>(r: &mut R) -> io::Result<Option<u64>> {
    let mut b = [0u8; 8];
    match r.read_exact(&mut b) {
        Ok(()) => Ok(Some(u64::from_le_bytes(b))),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e),
    }
}
