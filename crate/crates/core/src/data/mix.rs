use serde::{Deserialize, Serialize};

use super::tasks::TaskKind;
use crate::error::{Error, Result};

/// Integer sampling weights per entry. A task may appear in several entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub entries: Vec<(TaskKind, u32)>,
}

impl MixSpec {
    pub fn new(entries: Vec<(TaskKind, u32)>) -> Result<Self> {
        let spec = Self { entries };
        spec.validate()?;
        Ok(spec)
    }

    pub fn single(task: TaskKind) -> Self {
        Self {
            entries: vec![(task, 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() || self.total() == 0 {
            return Err(Error::Config("mix has zero total weight".into()));
        }
        if self.entries.iter().any(|&(_, w)| w == 0) {
            return Err(Error::Config("mix weights must be positive".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, w)| w as u64).sum()
    }

    /// `t2i:i2t:edit`-style label, e.g. `14:2:1`.
    pub fn ratio_label(&self) -> String {
        self.entries.iter().map(|(_, w)| w.to_string()).collect::<Vec<_>>().join(":")
    }
}

/// A position in a mixed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamItem {
    pub index: u64,
    /// Entry of the [`MixSpec`] that produced this item.
    pub entry: usize,
    pub task: TaskKind,
    pub seed: u64,
}

/// Deterministic weighted round-robin. Items repeat a fixed cycle holding
/// each entry exactly `weight` times; the cycle order is the one found with the
/// smallest worst-case window imbalance.
#[derive(Clone, Debug)]
pub struct MixStream {
    spec: MixSpec,
    cycle: Vec<usize>,
    seed: u64,
    index: u64,
}

pub fn mix_stream(spec: &MixSpec, seed: u64) -> Result<MixStream> {
    spec.validate()?;
    Ok(MixStream {
        cycle: cycle_schedule(&spec.entries.iter().map(|&(_, w)| w).collect::<Vec<_>>()),
        spec: spec.clone(),
        seed,
        index: 0,
    })
}

impl MixStream {
    /// Advances past `n` items without producing them.
    pub fn skip_items(&mut self, n: u64) {
        self.index += n;
    }

    pub fn position(&self) -> u64 {
        self.index
    }

    pub fn cycle(&self) -> &[usize] {
        &self.cycle
    }
}

impl Iterator for MixStream {
    type Item = StreamItem;

    fn next(&mut self) -> Option<StreamItem> {
        let entry = self.cycle[(self.index % self.cycle.len() as u64) as usize];
        let item = StreamItem {
            index: self.index,
            entry,
            task: self.spec.entries[entry].0,
            seed: sample_seed(self.seed, self.index),
        };
        self.index += 1;
        Some(item)
    }
}

/// Smooth weighted round-robin: each step every entry earns its weight and the
/// richest (lowest index on ties) is emitted and pays the total.
fn smooth_round_robin(weights: &[u32]) -> Vec<usize> {
    let total: i64 = weights.iter().map(|&w| w as i64).sum();
    let mut credit = vec![0i64; weights.len()];
    (0..total)
        .map(|_| {
            let mut best = 0;
            for (i, &w) in weights.iter().enumerate() {
                credit[i] += w as i64;
                if credit[i] > credit[best] {
                    best = i;
                }
            }
            credit[best] -= total;
            best
        })
        .collect()
}

/// Largest `|count - len * w / total|` over all windows of the periodic
/// extension of `cycle`, scaled by `total` to stay integral.
fn cyclic_discrepancy(cycle: &[usize], weights: &[u32]) -> i64 {
    let n = cycle.len();
    let total = n as i64;
    let mut worst = 0;
    for start in 0..n {
        let mut counts = vec![0i64; weights.len()];
        for len in 1..=n {
            counts[cycle[(start + len - 1) % n]] += 1;
            for (e, &w) in weights.iter().enumerate() {
                worst = worst.max((counts[e] * total - len as i64 * w as i64).abs());
            }
        }
    }
    worst
}

const SEARCH_MAX_CYCLE: u64 = 32;
const SEARCH_NODE_BUDGET: usize = 400_000;

/// One cycle of the stream. Starts from smooth round-robin and, for short
/// cycles, runs a bounded depth-first search for an order whose worst window
/// imbalance is smaller.
pub(crate) fn cycle_schedule(weights: &[u32]) -> Vec<usize> {
    let mut best = smooth_round_robin(weights);
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    if total > SEARCH_MAX_CYCLE || weights.len() < 2 {
        return best;
    }
    let mut bound = cyclic_discrepancy(&best, weights);
    let mut search = Search {
        weights,
        total: total as i64,
        remaining: weights.iter().map(|&w| w as i64).collect(),
        prefix: Vec::with_capacity(total as usize),
        nodes: 0,
    };
    while let Some(found) = search.run(bound) {
        bound = cyclic_discrepancy(&found, weights);
        best = found;
        search.nodes = 0;
        search.prefix.clear();
        search.remaining = weights.iter().map(|&w| w as i64).collect();
        if bound <= search.total {
            break;
        }
    }
    best
}

struct Search<'a> {
    weights: &'a [u32],
    total: i64,
    remaining: Vec<i64>,
    prefix: Vec<usize>,
    nodes: usize,
}

impl Search<'_> {
    /// First complete cycle (in lowest-entry-first order) whose discrepancy is
    /// strictly below `bound`.
    fn run(&mut self, bound: i64) -> Option<Vec<usize>> {
        if self.nodes > SEARCH_NODE_BUDGET {
            return None;
        }
        self.nodes += 1;
        if self.prefix.len() as i64 == self.total {
            let c = self.prefix.clone();
            return (cyclic_discrepancy(&c, self.weights) < bound).then_some(c);
        }
        for e in 0..self.weights.len() {
            if self.remaining[e] == 0 {
                continue;
            }
            self.prefix.push(e);
            self.remaining[e] -= 1;
            if self.suffix_ok(bound) {
                if let Some(c) = self.run(bound) {
                    return Some(c);
                }
            }
            self.remaining[e] += 1;
            self.prefix.pop();
        }
        None
    }

    /// Checks every window ending at the newest position.
    fn suffix_ok(&self, bound: i64) -> bool {
        let n = self.prefix.len();
        let mut counts = vec![0i64; self.weights.len()];
        for len in 1..=n {
            counts[self.prefix[n - len]] += 1;
            for (e, &w) in self.weights.iter().enumerate() {
                if (counts[e] * self.total - len as i64 * w as i64).abs() >= bound {
                    return false;
                }
            }
        }
        true
    }
}

/// Per-item seed derived from the stream seed.
pub fn sample_seed(stream_seed: u64, index: u64) -> u64 {
    let mut z = stream_seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
