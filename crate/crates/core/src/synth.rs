//! Seeded preferential-attachment edge lists for desk-scale benchmarks.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefAttach {
    pub nodes: u32,
    pub edges: u64,
    pub seed: u64,
}

impl PrefAttach {
    /// Most edges a simple graph on `nodes` vertices can carry.
    pub fn max_edges(&self) -> u64 {
        let n = self.nodes as u64;
        n * n.saturating_sub(1) / 2
    }

    /// Writes `src dst` lines and returns the number of edges written.
    ///
    /// Node `v` links to about `edges / (nodes - 1)` distinct earlier nodes,
    /// each drawn with probability proportional to its current degree. Quota a
    /// node cannot fill (it has too few predecessors) carries over to the next
    /// node, so the total is exact whenever it fits in a simple graph. Every
    /// edge joins distinct nodes and no pair repeats.
    pub fn write<W: Write>(&self, out: &mut W) -> io::Result<u64> {
        let n = self.nodes as u64;
        let target = self.edges.min(self.max_edges());
        writeln!(
            out,
            "# preferential attachment nodes={} edges={} seed={}",
            self.nodes, target, self.seed
        )?;
        if n < 2 {
            if n == 1 {
                // A lone node still needs a line to exist in the store.
                writeln!(out, "0 0")?;
            }
            return Ok(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // Every edge endpoint, so sampling an entry is degree-proportional.
        let mut endpoints: Vec<u32> = Vec::with_capacity((2 * target) as usize);
        let mut picked: Vec<u32> = Vec::new();
        let mut written = 0u64;
        let mut carry = 0u64;
        let span = n - 1;
        for v in 1..n {
            let quota = target * v / span - target * (v - 1) / span + carry;
            let take = quota.min(v);
            carry = quota - take;
            picked.clear();
            if take == v {
                picked.extend(0..v as u32);
            } else {
                let mut misses = 0u64;
                while (picked.len() as u64) < take {
                    let cand = if endpoints.is_empty() || misses > 8 * take {
                        rng.random_range(0..v as u32)
                    } else {
                        endpoints[rng.random_range(0..endpoints.len())]
                    };
                    if picked.contains(&cand) {
                        misses += 1;
                    } else {
                        picked.push(cand);
                    }
                }
            }
            for &u in &picked {
                writeln!(out, "{v} {u}")?;
                endpoints.push(u);
                endpoints.push(v as u32);
            }
            written += picked.len() as u64;
        }
        Ok(written)
    }
}
