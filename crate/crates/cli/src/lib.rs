//! `nebula` command line: ingest, stats, features, queries, benchmarks,
//! headless layout and serving.

pub mod bench;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nebula_core::features::{self, FeatureVector, PageRankParams};
use nebula_core::store::{build_store, BuildOptions, DEFAULT_RUN_CAPACITY};
use nebula_core::synth::PrefAttach;
use nebula_core::{Area, GraphStore, LayoutState, Selection, Subgraph};
use nebula_server::{AppState, ServiceConfig, StoreEntry};

use crate::bench::BenchSelection;

#[derive(Debug, Parser)]
#[command(name = "nebula", version, about = "Out-of-core graph exploration")]
pub struct Cli {
    /// Print the process's peak resident set size (kB) to stderr on exit.
    #[arg(long, global = true)]
    pub report_memory: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a store from a whitespace-separated edge list.
    Ingest {
        edge_list: PathBuf,
        out: PathBuf,
        #[arg(long)]
        directed: bool,
        /// Keep duplicate edges.
        #[arg(long)]
        no_dedupe: bool,
        #[arg(long)]
        keep_self_loops: bool,
        /// Tab-separated `external_id<TAB>label` lines.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Arcs held in memory per sorted run.
        #[arg(long, default_value_t = DEFAULT_RUN_CAPACITY, hide = true)]
        run_capacity: usize,
    },
    /// Print header counts.
    Stats {
        store: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compute PageRank and save it as the `pagerank` feature.
    Pagerank {
        store: PathBuf,
        #[arg(long, default_value_t = 0.85)]
        damping: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        /// Also print the N highest-ranked nodes.
        #[arg(long, default_value_t = 0)]
        top: usize,
    },
    /// Case-insensitive label prefix search.
    Search {
        store: PathBuf,
        query: String,
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
    /// Induce a subgraph and export it.
    Induce {
        store: PathBuf,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        expand: ExpandArgs,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Directory for nodes.csv and edges.csv; file for JSON (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the layout headless and write final positions as CSV.
    Layout {
        store: PathBuf,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        expand: ExpandArgs,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000.0)]
        width: f64,
        #[arg(long, default_value_t = 1000.0)]
        height: f64,
        /// Output CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time repeated inductions of k-node sets.
    BenchInduce {
        store: PathBuf,
        #[arg(long, default_value_t = 2000)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, value_enum, default_value_t = BenchSelection::Random)]
        selection: BenchSelection,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve datasets and live layout sessions.
    Serve(ServeArgs),
    /// Write a seeded synthetic edge list.
    GenSynthetic {
        #[arg(long)]
        nodes: u32,
        #[arg(long)]
        edges: u64,
        #[arg(long, value_enum, default_value_t = Model::PrefAttach)]
        model: Model,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    PrefAttach,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopK {
    pub feature: String,
    pub k: usize,
}

fn parse_top_k(s: &str) -> Result<TopK, String> {
    let (feature, k) = s
        .rsplit_once(':')
        .ok_or_else(|| format!("expected FEATURE:K, got {s:?}"))?;
    let k = k.parse().map_err(|_| format!("bad k in {s:?}"))?;
    if feature.is_empty() {
        return Err(format!("missing feature name in {s:?}"));
    }
    Ok(TopK {
        feature: feature.to_owned(),
        k,
    })
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct SelectionArgs {
    /// Comma-separated external ids.
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<String>>,
    /// FEATURE:K, e.g. pagerank:100.
    #[arg(long, value_parser = parse_top_k)]
    pub top_k: Option<TopK>,
    /// Comma-separated seed ids to expand from (see --hops, --cap).
    #[arg(long, value_delimiter = ',')]
    pub expand: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct ExpandArgs {
    #[arg(long, default_value_t = 1)]
    pub hops: usize,
    #[arg(long, default_value_t = 1000)]
    pub cap: usize,
}

impl SelectionArgs {
    pub fn to_selection(&self, expand: &ExpandArgs) -> Selection {
        if let Some(ids) = &self.ids {
            Selection::ExternalIds { ids: ids.clone() }
        } else if let Some(t) = &self.top_k {
            Selection::TopK {
                feature: t.feature.clone(),
                k: t.k,
            }
        } else {
            Selection::Expand {
                seeds: self.expand.clone().unwrap_or_default(),
                hops: expand.hops,
                cap: expand.cap,
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// TOML config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Store to serve; repeatable.
    #[arg(long = "store")]
    pub stores: Vec<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<std::net::IpAddr>,
    #[arg(long)]
    pub frame_rate: Option<f64>,
    #[arg(long)]
    pub iters_per_frame: Option<u32>,
    #[arg(long)]
    pub max_sessions: Option<usize>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Misuse of flags, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 success, 1 usage error, 2 data error.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let report_memory = cli.report_memory;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = execute(cli, &mut out);
    let _ = out.flush();
    if report_memory {
        if let Some(kb) = peak_rss_kb() {
            eprintln!("peak_rss_kb={kb}");
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// A closed stdout (say, piped into `head`) is not an error.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = c
            .downcast_ref::<io::Error>()
            .map(io::Error::kind)
            .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(|e| e.io_error_kind()))
            .or_else(|| match c.downcast_ref::<csv::Error>().map(csv::Error::kind) {
                Some(csv::ErrorKind::Io(io)) => Some(io.kind()),
                _ => None,
            });
        kind == Some(io::ErrorKind::BrokenPipe)
    })
}

/// Peak resident set size of this process, from `/proc/self/status`.
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

fn open_store(path: &Path) -> anyhow::Result<GraphStore> {
    GraphStore::open(path).with_context(|| format!("cannot open store {}", path.display()))
}

fn create_out(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest {
            edge_list,
            out: store,
            directed,
            no_dedupe,
            keep_self_loops,
            labels,
            run_capacity,
        } => {
            if run_capacity == 0 {
                return Err(usage("--run-capacity must be positive"));
            }
            let opts = BuildOptions {
                directed,
                dedupe: !no_dedupe,
                drop_self_loops: !keep_self_loops,
                labels_file: labels,
                run_capacity,
            };
            let s = build_store(&edge_list, &store, &opts)?;
            writeln!(out, "nodes={} edges={}", s.node_count, s.edge_count)?;
            writeln!(
                out,
                "build_secs={:.3} runs={} self_loops_dropped={}",
                s.elapsed.as_secs_f64(),
                s.runs,
                s.self_loops_dropped
            )?;
        }
        Command::Stats { store, json } => {
            let g = open_store(&store)?;
            if json {
                let v = serde_json::json!({
                    "node_count": g.node_count(),
                    "edge_count": g.edge_count(),
                    "neighbor_count": g.header().neighbor_count,
                    "directed": g.directed(),
                    "features": features::list_features(&store)?,
                });
                writeln!(out, "{v}")?;
            } else {
                writeln!(
                    out,
                    "nodes={} edges={} directed={}",
                    g.node_count(),
                    g.edge_count(),
                    g.directed()
                )?;
            }
        }
        Command::Pagerank {
            store,
            damping,
            tol,
            max_iters,
            top,
        } => {
            let g = open_store(&store)?;
            let params = PageRankParams {
                damping,
                max_iters,
                tol,
            };
            let fv = features::compute_pagerank(&g, &params).map_err(|e| match e {
                features::FeatureError::Damping(_)
                | features::FeatureError::Tolerance(_)
                | features::FeatureError::Iterations => usage(e.to_string()),
                other => other.into(),
            })?;
            let sidecar = features::save_feature(&store, &fv)?;
            let meta = fv.pagerank.expect("pagerank vectors carry metadata");
            let sum: f64 = fv.values.iter().sum();
            writeln!(
                out,
                "iterations={} residual={:e} sum={:.12}",
                meta.iterations, meta.residual, sum
            )?;
            writeln!(out, "sidecar={}", sidecar.display())?;
            print_top(out, &g, &fv, top)?;
        }
        Command::Search {
            store,
            query,
            limit,
        } => {
            let g = open_store(&store)?;
            for (node, label) in g.search_labels(&query, limit) {
                writeln!(
                    out,
                    "{node}\t{}\t{label}\t{}",
                    g.external_id(node)?,
                    g.degree(node)?
                )?;
            }
        }
        Command::Induce {
            store,
            selection,
            expand,
            format,
            out: target,
        } => {
            let g = open_store(&store)?;
            let sel = selection.to_selection(&expand);
            check_selection(&sel)?;
            let sub = sel.induce(&g)?;
            match format {
                Format::Csv => {
                    let dir = target.ok_or_else(|| usage("--format csv needs --out DIR"))?;
                    std::fs::create_dir_all(&dir)
                        .with_context(|| format!("cannot create {}", dir.display()))?;
                    write_csv(&dir, &sub)?;
                    writeln!(
                        out,
                        "nodes={} edges={} dir={}",
                        sub.node_count(),
                        sub.edge_count(),
                        dir.display()
                    )?;
                }
                Format::Json => {
                    let names = features::list_features(&store)?;
                    let vectors = names
                        .iter()
                        .map(|n| features::resolve_feature(&g, n))
                        .collect::<Result<Vec<_>, _>>()?;
                    let refs: Vec<&FeatureVector> = vectors.iter().collect();
                    let payload = sub.to_payload(&refs);
                    match target {
                        Some(path) => {
                            let mut w = create_out(&path)?;
                            serde_json::to_writer(&mut w, &payload)?;
                            w.flush()?;
                        }
                        None => {
                            serde_json::to_writer(&mut *out, &payload)?;
                            writeln!(out)?;
                        }
                    }
                }
            }
        }
        Command::Layout {
            store,
            selection,
            expand,
            iters,
            seed,
            width,
            height,
            out: target,
        } => {
            let g = open_store(&store)?;
            let sel = selection.to_selection(&expand);
            check_selection(&sel)?;
            let sub = sel.induce(&g)?;
            let mut layout = LayoutState::new(&sub, seed, Area::new(width, height))?;
            layout.step(&sub, iters)?;
            match target {
                Some(path) => {
                    let mut w = create_out(&path)?;
                    write_positions(&mut w, &layout)?;
                    w.flush()?;
                    writeln!(
                        out,
                        "nodes={} edges={} iterations={} temperature={:.6}",
                        sub.node_count(),
                        sub.edge_count(),
                        layout.iteration(),
                        layout.temperature()
                    )?;
                }
                None => write_positions(out, &layout)?,
            }
        }
        Command::BenchInduce {
            store,
            k,
            runs,
            selection,
            seed,
            json,
        } => {
            if runs == 0 {
                return Err(usage("--runs must be at least 1"));
            }
            let g = open_store(&store)?;
            let mut report = bench::run(&g, k, runs, selection, seed)?;
            report.peak_rss_kb = peak_rss_kb();
            write!(out, "{}", report.table())?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
            if let Some(path) = json {
                let mut w = create_out(&path)?;
                serde_json::to_writer_pretty(&mut w, &report)?;
                w.flush()?;
            }
        }
        Command::Serve(args) => serve(args, out)?,
        Command::GenSynthetic {
            nodes,
            edges,
            model: Model::PrefAttach,
            seed,
            out: path,
        } => {
            let gen = PrefAttach { nodes, edges, seed };
            if edges > gen.max_edges() {
                return Err(usage(format!(
                    "{edges} edges do not fit a simple graph on {nodes} nodes (max {})",
                    gen.max_edges()
                )));
            }
            let start = Instant::now();
            let mut w = create_out(&path)?;
            let written = gen.write(&mut w)?;
            w.flush()?;
            writeln!(
                out,
                "nodes={nodes} edges={written} secs={:.3}",
                start.elapsed().as_secs_f64()
            )?;
        }
    }
    Ok(())
}

fn print_top(out: &mut dyn Write, g: &GraphStore, fv: &FeatureVector, n: usize) -> anyhow::Result<()> {
    for node in nebula_core::subgraph::top_k(&fv.values, n) {
        writeln!(
            out,
            "{node}\t{}\t{:.12e}",
            g.external_id(node)?,
            fv.values[node as usize]
        )?;
    }
    Ok(())
}

/// `nodes.csv`: local_index,id,external_id,label,degree. `edges.csv`: source,target.
pub fn write_csv(dir: &Path, sub: &Subgraph) -> anyhow::Result<()> {
    let mut nodes = csv::Writer::from_path(dir.join("nodes.csv"))?;
    nodes.write_record(["local_index", "id", "external_id", "label", "degree"])?;
    for (i, r) in sub.nodes.iter().enumerate() {
        nodes.write_record([
            i.to_string(),
            r.internal.to_string(),
            r.external_id.clone(),
            r.label.clone(),
            r.degree.to_string(),
        ])?;
    }
    nodes.flush()?;
    let mut edges = csv::Writer::from_path(dir.join("edges.csv"))?;
    edges.write_record(["source", "target"])?;
    for (u, v) in &sub.edges {
        edges.write_record([u.to_string(), v.to_string()])?;
    }
    edges.flush()?;
    Ok(())
}

/// local_index,x,y with positions printed round-trip exact.
pub fn write_positions(w: &mut dyn Write, layout: &LayoutState) -> anyhow::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["local_index", "x", "y"])?;
    for (i, p) in layout.positions().iter().enumerate() {
        csv.write_record([i.to_string(), p.x.to_string(), p.y.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

fn serve(args: ServeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    cfg.stores
        .extend(args.stores.iter().map(StoreEntry::from_path));
    cfg.apply_env()?;
    if let Some(p) = args.port {
        cfg.port = p;
    }
    if let Some(b) = args.bind {
        cfg.bind = b;
    }
    if let Some(f) = args.frame_rate {
        cfg.frame_rate = f;
    }
    if let Some(i) = args.iters_per_frame {
        cfg.iters_per_frame = i;
    }
    if let Some(m) = args.max_sessions {
        cfg.max_sessions = m;
    }
    if let Some(d) = args.static_dir {
        cfg.static_dir = Some(d);
    }
    if let Err(e) = cfg.validate() {
        return Err(usage(e.to_string()));
    }
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .try_init();
    let state = AppState::new(cfg.clone())?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((cfg.bind, cfg.port))
            .await
            .with_context(|| format!("cannot bind {}:{}", cfg.bind, cfg.port))?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        nebula_server::serve_on(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

/// Rejects empty selections up front so they read as usage errors.
pub fn check_selection(sel: &Selection) -> anyhow::Result<()> {
    match sel {
        Selection::ExternalIds { ids } | Selection::Expand { seeds: ids, .. } if ids.is_empty() => {
            bail!(UsageError("selection names no nodes".into()))
        }
        _ => Ok(()),
    }
}
