//! Canonical keys by colour refinement with individualization-refinement
//! search over colour ties.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AtomRegistry, ChemError, MolecularGraph};

pub const DEFAULT_MAX_CANON_NODES: usize = 64;

/// Isomorphism-invariant identity of a labelled molecular graph.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanonicalKey(Vec<u8>);

impl CanonicalKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl fmt::Debug for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CanonicalKey({})", self.to_hex())
    }
}

pub fn canonical_key(g: &MolecularGraph, registry: &AtomRegistry) -> Result<CanonicalKey, ChemError> {
    canonical_key_with_limit(g, registry, DEFAULT_MAX_CANON_NODES)
}

pub fn canonical_key_with_limit(
    g: &MolecularGraph,
    registry: &AtomRegistry,
    max_nodes: usize,
) -> Result<CanonicalKey, ChemError> {
    let n = g.num_atoms();
    if n > max_nodes {
        return Err(ChemError::SizeOverflow { nodes: n, max: max_nodes });
    }
    let labels: Vec<&str> = g.atoms().iter().map(|&a| registry.symbol(a)).collect();
    let mut distinct: Vec<&str> = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let initial: Vec<u32> = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("present") as u32)
        .collect();

    let search = Search {
        adj: g.adjacency(),
        orders: g.order_matrix(),
        labels,
    };
    let root = search.refine(initial);
    let mut best: Option<Vec<u8>> = None;
    search.explore(root, &mut best);
    Ok(CanonicalKey(best.unwrap_or_default()))
}

struct Search<'a> {
    adj: Vec<Vec<(usize, u8)>>,
    orders: Vec<Vec<u8>>,
    labels: Vec<&'a str>,
}

impl Search<'_> {
    /// Split colour classes until every vertex in a class sees the same
    /// multiset of (neighbour colour, bond order). Colours are dense ranks.
    fn refine(&self, mut colors: Vec<u32>) -> Vec<u32> {
        let n = colors.len();
        let mut classes = count_distinct(&colors);
        loop {
            let signatures: Vec<(u32, Vec<(u32, u8)>)> = (0..n)
                .map(|v| {
                    let mut nb: Vec<(u32, u8)> =
                        self.adj[v].iter().map(|&(u, o)| (colors[u], o)).collect();
                    nb.sort_unstable();
                    (colors[v], nb)
                })
                .collect();
            let mut sorted: Vec<&(u32, Vec<(u32, u8)>)> = signatures.iter().collect();
            sorted.sort();
            sorted.dedup();
            let next: Vec<u32> = signatures
                .iter()
                .map(|s| sorted.binary_search(&s).expect("present") as u32)
                .collect();
            let next_classes = sorted.len();
            colors = next;
            if next_classes == classes {
                return colors;
            }
            classes = next_classes;
        }
    }

    fn explore(&self, colors: Vec<u32>, best: &mut Option<Vec<u8>>) {
        let n = colors.len();
        let mut counts = vec![0usize; n];
        for &c in &colors {
            counts[c as usize] += 1;
        }
        // First non-singleton cell in colour order.
        let Some(target) = (0..n).find(|&c| counts[c] > 1) else {
            let cert = self.certificate(&colors);
            if best.as_ref().is_none_or(|b| cert < *b) {
                *best = Some(cert);
            }
            return;
        };
        let cell: Vec<usize> = (0..n).filter(|&v| colors[v] as usize == target).collect();
        let mut representatives: Vec<usize> = Vec::new();
        for &v in &cell {
            if representatives.iter().all(|&r| !self.twins(r, v)) {
                representatives.push(v);
            }
        }
        for v in representatives {
            let mut next: Vec<u32> = colors.iter().map(|&c| 2 * c + 1).collect();
            next[v] = 2 * target as u32;
            let refined = self.refine(dense_ranks(&next));
            self.explore(refined, best);
        }
    }

    /// Swapping `a` and `b` while fixing every other vertex is an automorphism.
    fn twins(&self, a: usize, b: usize) -> bool {
        self.labels[a] == self.labels[b]
            && (0..self.orders.len())
                .filter(|&w| w != a && w != b)
                .all(|w| self.orders[a][w] == self.orders[b][w])
    }

    fn certificate(&self, colors: &[u32]) -> Vec<u8> {
        let n = colors.len();
        let mut at = vec![0usize; n];
        for (v, &c) in colors.iter().enumerate() {
            at[c as usize] = v;
        }
        let mut out = Vec::with_capacity(4 + 3 * n + 5 * n);
        out.extend_from_slice(&(n as u16).to_be_bytes());
        for &v in &at {
            out.extend_from_slice(self.labels[v].as_bytes());
            out.push(0);
        }
        let mut edges: Vec<(u16, u16, u8)> = Vec::new();
        for (v, list) in self.adj.iter().enumerate() {
            for &(u, o) in list {
                let (p, q) = (colors[v] as u16, colors[u] as u16);
                if p < q {
                    edges.push((p, q, o));
                }
            }
        }
        edges.sort_unstable();
        out.extend_from_slice(&(edges.len() as u16).to_be_bytes());
        for (p, q, o) in edges {
            out.extend_from_slice(&p.to_be_bytes());
            out.extend_from_slice(&q.to_be_bytes());
            out.push(o);
        }
        out
    }
}

fn count_distinct(colors: &[u32]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

fn dense_ranks(colors: &[u32]) -> Vec<u32> {
    let mut d = colors.to_vec();
    d.sort_unstable();
    d.dedup();
    colors
        .iter()
        .map(|c| d.binary_search(c).expect("present") as u32)
        .collect()
}
