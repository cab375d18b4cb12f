//! Incremental Fruchterman–Reingold layout.
//!
//! Repulsion `k²/d` acts between every pair of nodes, attraction `d²/k` along
//! edges. Each iteration moves a free node by its net force clamped to the
//! current temperature, then cools the temperature geometrically down to a
//! floor. Above [`BARNES_HUT_THRESHOLD`] nodes repulsion is approximated with a
//! quadtree. Stepping runs in small batches so callers can interleave it with
//! pinning and dragging.

mod quadtree;

use std::ops::{Add, AddAssign, Mul, Sub, SubAssign};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::store::NodeId;
use crate::subgraph::Subgraph;
pub use quadtree::QuadTree;

/// `k = C * sqrt(area / n)`.
pub const IDEAL_LENGTH_C: f64 = 1.0;
/// Initial temperature as a fraction of `min(width, height)`.
pub const INITIAL_TEMPERATURE: f64 = 0.1;
pub const COOLING: f64 = 0.95;
/// Temperature floor as a fraction of `k`.
pub const TEMPERATURE_FLOOR: f64 = 1e-3;
pub const THETA: f64 = 0.8;
pub const COINCIDENCE_EPS: f64 = 1e-9;
pub const BARNES_HUT_THRESHOLD: usize = 1000;
/// Expansion re-heats to this fraction of the initial temperature.
pub const REHEAT: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("cannot lay out an empty subgraph")]
    Empty,
    #[error("layout area must be positive and finite, got {0} x {1}")]
    Area(f64, f64),
    #[error("layout has {state} nodes but the subgraph has {subgraph}")]
    SizeMismatch { state: usize, subgraph: usize },
    #[error("node index {index} out of range for {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("position must be finite")]
    NonFinite,
    #[error("edge ({0}, {1}) references a missing node")]
    BadEdge(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Area {
    pub width: f64,
    pub height: f64,
}

impl Area {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    fn validate(self) -> Result<(), LayoutError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.width) && ok(self.height) {
            Ok(())
        } else {
            Err(LayoutError::Area(self.width, self.height))
        }
    }
}

impl Default for Area {
    fn default() -> Self {
        Self::new(1000.0, 1000.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Repulsion {
    /// Exact below [`BARNES_HUT_THRESHOLD`] nodes, quadtree above.
    #[default]
    Auto,
    Exact,
    BarnesHut,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iterations_run: usize,
    pub max_displacement: f64,
    pub temperature_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutState {
    positions: Vec<Vec2>,
    pinned: Vec<bool>,
    temperature: f64,
    k: f64,
    iteration: u64,
    seed: u64,
    area: Area,
    repulsion: Repulsion,
}

fn ideal_length(area: Area, n: usize) -> f64 {
    IDEAL_LENGTH_C * (area.width * area.height / n as f64).sqrt()
}

fn initial_temperature(area: Area) -> f64 {
    INITIAL_TEMPERATURE * area.width.min(area.height)
}

/// SplitMix64 finalizer; used for seed-derived jitter directions.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_from_hash(h: u64) -> Vec2 {
    let angle = (h >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
    Vec2::new(angle.cos(), angle.sin())
}

impl LayoutState {
    /// Uniform random positions over the area centred on the origin, drawn
    /// from ChaCha8 seeded with `seed`.
    pub fn new(subgraph: &Subgraph, seed: u64, area: Area) -> Result<Self, LayoutError> {
        Self::with_node_count(subgraph.node_count(), seed, area)
    }

    pub fn with_node_count(n: usize, seed: u64, area: Area) -> Result<Self, LayoutError> {
        if n == 0 {
            return Err(LayoutError::Empty);
        }
        area.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| {
                let x = (rng.random::<f64>() - 0.5) * area.width;
                let y = (rng.random::<f64>() - 0.5) * area.height;
                Vec2::new(x, y)
            })
            .collect();
        Ok(Self {
            positions,
            pinned: vec![false; n],
            temperature: initial_temperature(area),
            k: ideal_length(area, n),
            iteration: 0,
            seed,
            area,
            repulsion: Repulsion::Auto,
        })
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn area(&self) -> Area {
        self.area
    }

    pub fn temperature_floor(&self) -> f64 {
        TEMPERATURE_FLOOR * self.k
    }

    /// True once cooling has reached the temperature floor.
    pub fn is_cooled(&self) -> bool {
        self.temperature <= self.temperature_floor()
    }

    pub fn is_pinned(&self, index: usize) -> bool {
        self.pinned.get(index).copied().unwrap_or(false)
    }

    pub fn pinned_count(&self) -> usize {
        self.pinned.iter().filter(|p| **p).count()
    }

    pub fn set_repulsion(&mut self, mode: Repulsion) {
        self.repulsion = mode;
    }

    pub fn set_temperature(&mut self, t: f64) {
        if t.is_finite() && t > 0.0 {
            self.temperature = t.max(self.temperature_floor());
        }
    }

    /// Re-heats to a fraction of the initial temperature.
    pub fn reheat(&mut self) {
        self.temperature = (REHEAT * initial_temperature(self.area)).max(self.temperature_floor());
    }

    fn check_index(&self, index: usize) -> Result<(), LayoutError> {
        if index < self.positions.len() {
            Ok(())
        } else {
            Err(LayoutError::IndexOutOfRange {
                index,
                len: self.positions.len(),
            })
        }
    }

    fn check_move(&self, index: usize, pos: Vec2) -> Result<(), LayoutError> {
        self.check_index(index)?;
        if pos.is_finite() {
            Ok(())
        } else {
            Err(LayoutError::NonFinite)
        }
    }

    /// Pins `index` at `pos`; stepping leaves it untouched until unpinned.
    pub fn pin(&mut self, index: usize, pos: Vec2) -> Result<(), LayoutError> {
        self.check_move(index, pos)?;
        self.pinned[index] = true;
        self.positions[index] = pos;
        Ok(())
    }

    pub fn unpin(&mut self, index: usize) -> Result<(), LayoutError> {
        self.check_index(index)?;
        self.pinned[index] = false;
        Ok(())
    }

    /// Moves a node regardless of its pin state.
    pub fn set_position(&mut self, index: usize, pos: Vec2) -> Result<(), LayoutError> {
        self.check_move(index, pos)?;
        self.positions[index] = pos;
        Ok(())
    }

    fn check_subgraph(&self, subgraph: &Subgraph) -> Result<(), LayoutError> {
        let n = self.positions.len();
        if subgraph.node_count() != n {
            return Err(LayoutError::SizeMismatch {
                state: n,
                subgraph: subgraph.node_count(),
            });
        }
        if let Some(&(u, v)) = subgraph
            .edges
            .iter()
            .find(|(u, v)| *u as usize >= n || *v as usize >= n)
        {
            return Err(LayoutError::BadEdge(u, v));
        }
        Ok(())
    }

    fn uses_quadtree(&self) -> bool {
        match self.repulsion {
            Repulsion::Auto => self.positions.len() > BARNES_HUT_THRESHOLD,
            Repulsion::Exact => false,
            Repulsion::BarnesHut => true,
        }
    }

    /// Positions used for force evaluation: a copy in which every free node
    /// lying within [`COINCIDENCE_EPS`] of an earlier node is nudged in a
    /// seed-derived direction. Real positions are not changed.
    fn separated_positions(&self) -> Vec<Vec2> {
        let mut work = self.positions.clone();
        let n = work.len();
        let mut by_x: Vec<usize> = (0..n).collect();
        by_x.sort_unstable_by(|&a, &b| work[a].x.total_cmp(&work[b].x).then(a.cmp(&b)));
        let eps2 = COINCIDENCE_EPS * COINCIDENCE_EPS;
        let mut nudge = vec![false; n];
        for a in 0..n {
            let i = by_x[a];
            for &j in &by_x[a + 1..] {
                if work[j].x - work[i].x >= COINCIDENCE_EPS {
                    break;
                }
                let d = work[j] - work[i];
                if d.dot(d) < eps2 {
                    let (lo, hi) = (i.min(j), i.max(j));
                    if !self.pinned[hi] {
                        nudge[hi] = true;
                    } else if !self.pinned[lo] {
                        nudge[lo] = true;
                    }
                }
            }
        }
        let radius = 0.01 * self.k;
        for (i, w) in work.iter_mut().enumerate() {
            if nudge[i] {
                let h = mix(self.seed ^ mix(self.iteration ^ mix(i as u64)));
                *w += unit_from_hash(h) * radius;
            }
        }
        work
    }

    /// Net force on every node for the next iteration (before clamping).
    pub fn forces(&self, subgraph: &Subgraph) -> Result<Vec<Vec2>, LayoutError> {
        self.check_subgraph(subgraph)?;
        let work = self.separated_positions();
        Ok(self.net_forces(&work, &subgraph.edges))
    }

    fn net_forces(&self, work: &[Vec2], edges: &[(u32, u32)]) -> Vec<Vec2> {
        let k = self.k;
        let mut disp = if self.uses_quadtree() {
            barnes_hut_repulsion(work, k, THETA)
        } else {
            exact_repulsion(work, k)
        };
        for &(u, v) in edges {
            let (u, v) = (u as usize, v as usize);
            let d = work[u] - work[v];
            let dist = d.norm();
            if dist > 0.0 {
                let f = d * (dist / k);
                disp[u] -= f;
                disp[v] += f;
            }
        }
        disp
    }

    /// Runs `batch` iterations.
    pub fn step(&mut self, subgraph: &Subgraph, batch: usize) -> Result<StepStats, LayoutError> {
        self.check_subgraph(subgraph)?;
        let mut max_disp = 0.0f64;
        for _ in 0..batch {
            let work = self.separated_positions();
            let disp = self.net_forces(&work, &subgraph.edges);
            let t = self.temperature;
            for (i, d) in disp.into_iter().enumerate() {
                if self.pinned[i] {
                    continue;
                }
                let len = d.norm();
                if len > 0.0 && len.is_finite() {
                    let moved = len.min(t);
                    self.positions[i] += d * (moved / len);
                    max_disp = max_disp.max(moved);
                }
            }
            self.temperature = (t * COOLING).max(self.temperature_floor());
            self.iteration += 1;
        }
        Ok(StepStats {
            iterations_run: batch,
            max_displacement: max_disp,
            temperature_after: self.temperature,
        })
    }

    /// Carries the layout over to a grown node list. Nodes present in both
    /// lists keep their positions and pin state bitwise; new nodes are placed
    /// in a seed-derived jitter around `origin`. `k` is recomputed for the new
    /// node count and the temperature re-heated.
    pub fn regrow(&self, old_ids: &[NodeId], new_ids: &[NodeId], origin: Vec2, salt: u64) -> Self {
        let k = ideal_length(self.area, new_ids.len().max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(salt)));
        let mut positions = Vec::with_capacity(new_ids.len());
        let mut pinned = Vec::with_capacity(new_ids.len());
        for id in new_ids {
            match old_ids.binary_search(id) {
                Ok(old) => {
                    positions.push(self.positions[old]);
                    pinned.push(self.pinned[old]);
                }
                Err(_) => {
                    let off = Vec2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                    positions.push(origin + off * k);
                    pinned.push(false);
                }
            }
        }
        let mut next = Self {
            positions,
            pinned,
            temperature: self.temperature,
            k,
            iteration: self.iteration,
            seed: self.seed,
            area: self.area,
            repulsion: self.repulsion,
        };
        next.reheat();
        next
    }
}

/// All-pairs repulsion `k² δ / |δ|²`, skipping pairs closer than [`COINCIDENCE_EPS`].
pub fn exact_repulsion(points: &[Vec2], k: f64) -> Vec<Vec2> {
    let k2 = k * k;
    let eps2 = COINCIDENCE_EPS * COINCIDENCE_EPS;
    let mut out = vec![Vec2::ZERO; points.len()];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i] - points[j];
            let d2 = d.dot(d);
            if d2 >= eps2 {
                let f = d * (k2 / d2);
                out[i] += f;
                out[j] -= f;
            }
        }
    }
    out
}

pub fn barnes_hut_repulsion(points: &[Vec2], k: f64, theta: f64) -> Vec<Vec2> {
    let tree = QuadTree::build(points);
    (0..points.len())
        .map(|i| tree.repulsion(i, k * k, theta, COINCIDENCE_EPS))
        .collect()
}
