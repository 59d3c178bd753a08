//! Structural statistics used by the distribution metrics.

use serde::{Deserialize, Serialize};

use super::MolecularGraph;

/// Number of automorphism orbits of connected 4-node graphlets.
pub const ORBITS_4: usize = 11;

/// Orbit slots, offset from the conventional numbering (4..=14).
pub mod orbit {
    pub const PATH_END: usize = 0;
    pub const PATH_MIDDLE: usize = 1;
    pub const STAR_LEAF: usize = 2;
    pub const STAR_CENTER: usize = 3;
    pub const CYCLE: usize = 4;
    pub const PAW_PENDANT: usize = 5;
    pub const PAW_TRIANGLE: usize = 6;
    pub const PAW_HUB: usize = 7;
    pub const DIAMOND_RIM: usize = 8;
    pub const DIAMOND_SPINE: usize = 9;
    pub const CLIQUE: usize = 10;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStatistics {
    /// `degree_histogram[d]` = number of nodes of degree `d`.
    pub degree_histogram: Vec<usize>,
    pub clustering: Vec<f64>,
    /// Per node, how often it occupies each 4-node orbit.
    pub orbit_counts: Vec<[u64; ORBITS_4]>,
}

pub fn graph_statistics(g: &MolecularGraph) -> GraphStatistics {
    GraphStatistics {
        degree_histogram: degree_histogram(g),
        clustering: clustering_coefficients(g),
        orbit_counts: orbit_counts(g),
    }
}

pub fn degree_histogram(g: &MolecularGraph) -> Vec<usize> {
    let deg = g.degrees();
    let max = deg.iter().copied().max().unwrap_or(0);
    let mut h = vec![0; max + 1];
    for d in deg {
        h[d] += 1;
    }
    h
}

/// Local clustering coefficient; nodes of degree < 2 get 0.
pub fn clustering_coefficients(g: &MolecularGraph) -> Vec<f64> {
    let n = g.num_atoms();
    let m = bool_matrix(g);
    (0..n)
        .map(|v| {
            let nb: Vec<usize> = (0..n).filter(|&u| m[v][u]).collect();
            let d = nb.len();
            if d < 2 {
                return 0.0;
            }
            let mut tri = 0usize;
            for (a, &x) in nb.iter().enumerate() {
                for &y in &nb[a + 1..] {
                    if m[x][y] {
                        tri += 1;
                    }
                }
            }
            tri as f64 / (d * (d - 1) / 2) as f64
        })
        .collect()
}

/// Exhaustive count over all node quadruples. Each connected induced
/// quadruple is classified from its edge count and induced degrees.
pub fn orbit_counts(g: &MolecularGraph) -> Vec<[u64; ORBITS_4]> {
    let n = g.num_atoms();
    let m = bool_matrix(g);
    let mut counts = vec![[0u64; ORBITS_4]; n];
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    let q = [a, b, c, d];
                    let mut deg = [0usize; 4];
                    let mut edges = 0;
                    for x in 0..4 {
                        for y in x + 1..4 {
                            if m[q[x]][q[y]] {
                                deg[x] += 1;
                                deg[y] += 1;
                                edges += 1;
                            }
                        }
                    }
                    // With four nodes, >= 3 edges and no isolated node means connected.
                    if edges < 3 || deg.contains(&0) {
                        continue;
                    }
                    let max_deg = *deg.iter().max().expect("four entries");
                    for x in 0..4 {
                        let slot = match (edges, max_deg, deg[x]) {
                            (3, 2, 1) => orbit::PATH_END,
                            (3, 2, 2) => orbit::PATH_MIDDLE,
                            (3, 3, 1) => orbit::STAR_LEAF,
                            (3, 3, 3) => orbit::STAR_CENTER,
                            (4, 2, _) => orbit::CYCLE,
                            (4, 3, 1) => orbit::PAW_PENDANT,
                            (4, 3, 2) => orbit::PAW_TRIANGLE,
                            (4, 3, 3) => orbit::PAW_HUB,
                            (5, _, 2) => orbit::DIAMOND_RIM,
                            (5, _, 3) => orbit::DIAMOND_SPINE,
                            (6, _, _) => orbit::CLIQUE,
                            other => unreachable!("impossible graphlet {other:?}"),
                        };
                        counts[q[x]][slot] += 1;
                    }
                }
            }
        }
    }
    counts
}

fn bool_matrix(g: &MolecularGraph) -> Vec<Vec<bool>> {
    g.order_matrix()
        .into_iter()
        .map(|row| row.into_iter().map(|o| o > 0).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> MolecularGraph {
        MolecularGraph::new(vec![0; n], edges.iter().map(|&(a, b)| (a, b, 1))).unwrap()
    }

    #[test]
    fn path_of_four() {
        let s = graph_statistics(&graph(4, &[(0, 1), (1, 2), (2, 3)]));
        assert_eq!(s.degree_histogram, vec![0, 2, 2]);
        assert_eq!(s.orbit_counts[0][orbit::PATH_END], 1);
        assert_eq!(s.orbit_counts[1][orbit::PATH_MIDDLE], 1);
        assert_eq!(s.clustering, vec![0.0; 4]);
    }

    #[test]
    fn clique_of_four() {
        let s = graph_statistics(&graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]));
        assert!(s.orbit_counts.iter().all(|c| c[orbit::CLIQUE] == 1));
        assert_eq!(s.clustering, vec![1.0; 4]);
    }

    #[test]
    fn paw() {
        let s = graph_statistics(&graph(4, &[(0, 1), (1, 2), (0, 2), (2, 3)]));
        assert_eq!(s.orbit_counts[3][orbit::PAW_PENDANT], 1);
        assert_eq!(s.orbit_counts[2][orbit::PAW_HUB], 1);
        assert_eq!(s.orbit_counts[0][orbit::PAW_TRIANGLE], 1);
        assert!((s.clustering[2] - 1.0 / 3.0).abs() < 1e-15);
    }
}
