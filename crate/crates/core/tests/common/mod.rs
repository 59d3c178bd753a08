//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use mdvae::chem::{AtomRegistry, MolecularGraph};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random connected graph that respects valences: a random tree plus a few
/// ring bonds. Carbon-heavy so that ring systems and ties are common.
pub fn random_valid_graph(rng: &mut impl Rng, max_nodes: usize, registry: &AtomRegistry) -> MolecularGraph {
    let n = rng.random_range(1..=max_nodes);
    let k = registry.len();
    let mut atoms = Vec::with_capacity(n);
    let mut rem: Vec<i32> = Vec::with_capacity(n);
    let mut bonds: Vec<(usize, usize, u8)> = Vec::new();
    for v in 0..n {
        let a = if rng.random_bool(0.6) { 0 } else { rng.random_range(0..k) };
        let val = registry.max_valence(a) as i32;
        let parents: Vec<usize> = (0..v).filter(|&u| rem[u] >= 1).collect();
        if v > 0 && parents.is_empty() {
            break;
        }
        atoms.push(a);
        rem.push(val);
        if v > 0 {
            let u = *parents.choose(rng).expect("nonempty");
            let cap = rem[u].min(rem[v]).min(3);
            let order = if rng.random_bool(0.75) { 1 } else { rng.random_range(1..=cap) };
            rem[u] -= order;
            rem[v] -= order;
            bonds.push((u, v, order as u8));
        }
    }
    let n = atoms.len();
    let extra = if n >= 3 { rng.random_range(0..=n / 2) } else { 0 };
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b || rem[a] < 1 || rem[b] < 1 {
            continue;
        }
        if bonds.iter().any(|&(x, y, _)| (x, y) == (a.min(b), a.max(b)) || (x, y) == (a.max(b), a.min(b))) {
            continue;
        }
        let cap = rem[a].min(rem[b]).min(3);
        let order = if rng.random_bool(0.8) { 1 } else { rng.random_range(1..=cap) };
        rem[a] -= order;
        rem[b] -= order;
        bonds.push((a.min(b), a.max(b), order as u8));
    }
    let g = MolecularGraph::new(atoms, bonds).expect("generator keeps the graph simple");
    assert!(g.is_valid(registry));
    g
}

/// Random simple graph on all-carbon nodes, ignoring valence; used where only
/// topology matters.
pub fn random_topology(rng: &mut impl Rng, n: usize, p: f64) -> MolecularGraph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b, 1));
            }
        }
    }
    MolecularGraph::new(vec![0; n], edges).expect("simple")
}

pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Exhaustive search for a label- and order-preserving bijection. Partial maps
/// that already disagree on a pair are abandoned, every surviving branch is a
/// prefix of a permutation that is checked pair by pair.
pub fn isomorphic(g: &MolecularGraph, h: &MolecularGraph) -> bool {
    let n = g.num_atoms();
    if n != h.num_atoms() || g.bonds().len() != h.bonds().len() {
        return false;
    }
    let mg = g.order_matrix();
    let mh = h.order_matrix();
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];

    fn extend(
        i: usize,
        g: &MolecularGraph,
        h: &MolecularGraph,
        mg: &[Vec<u8>],
        mh: &[Vec<u8>],
        map: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        let n = map.len();
        if i == n {
            return true;
        }
        for j in 0..n {
            if used[j] || g.atom(i) != h.atom(j) {
                continue;
            }
            if (0..i).any(|k| mg[i][k] != mh[j][map[k]]) {
                continue;
            }
            map[i] = j;
            used[j] = true;
            if extend(i + 1, g, h, mg, mh, map, used) {
                return true;
            }
            used[j] = false;
        }
        map[i] = usize::MAX;
        false
    }
    extend(0, g, h, &mg, &mh, &mut map, &mut used)
}

/// Orbit counts by matching every node quadruple against the six connected
/// 4-node graphlets under all 24 orderings.
pub fn orbit_oracle(g: &MolecularGraph) -> Vec<[u64; 11]> {
    // (edges as pairs of template positions, orbit slot per position)
    let templates: [(&[(usize, usize)], [usize; 4]); 6] = [
        (&[(0, 1), (1, 2), (2, 3)], [0, 1, 1, 0]),
        (&[(0, 1), (0, 2), (0, 3)], [3, 2, 2, 2]),
        (&[(0, 1), (1, 2), (2, 3), (0, 3)], [4, 4, 4, 4]),
        (&[(0, 1), (1, 2), (0, 2), (2, 3)], [6, 6, 7, 5]),
        (&[(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)], [8, 9, 9, 8]),
        (&[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], [10, 10, 10, 10]),
    ];
    let perms = permutations4();
    let m = g.order_matrix();
    let n = g.num_atoms();
    let mut out = vec![[0u64; 11]; n];
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    let q = [a, b, c, d];
                    'found: for (edges, orbits) in &templates {
                        let mut t = [[false; 4]; 4];
                        for &(x, y) in *edges {
                            t[x][y] = true;
                            t[y][x] = true;
                        }
                        for p in &perms {
                            let fits = (0..4).all(|x| {
                                (0..4).all(|y| x == y || t[x][y] == (m[q[p[x]]][q[p[y]]] > 0))
                            });
                            if fits {
                                for x in 0..4 {
                                    out[q[p[x]]][orbits[x]] += 1;
                                }
                                break 'found;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut s = p;
                    s.sort_unstable();
                    if s == [0, 1, 2, 3] {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Mutate a graph slightly while keeping it valid: change one bond order,
/// move one bond endpoint, or relabel an atom. Falls back to a permuted copy.
pub fn near_miss(rng: &mut impl Rng, g: &MolecularGraph, registry: &AtomRegistry) -> MolecularGraph {
    let n = g.num_atoms();
    for _ in 0..20 {
        let mut atoms = g.atoms().to_vec();
        let mut bonds: Vec<(usize, usize, u8)> = g.bonds().iter().map(|b| (b.i, b.j, b.order)).collect();
        match rng.random_range(0..3) {
            0 if !bonds.is_empty() => {
                let k = rng.random_range(0..bonds.len());
                bonds[k].2 = rng.random_range(1..=3);
            }
            1 if !bonds.is_empty() => {
                let k = rng.random_range(0..bonds.len());
                bonds[k].1 = rng.random_range(0..n);
            }
            _ => {
                let v = rng.random_range(0..n);
                atoms[v] = rng.random_range(0..registry.len());
            }
        }
        if let Ok(h) = MolecularGraph::new(atoms, bonds) {
            if h.is_valid(registry) {
                let p = random_permutation(rng, n);
                return h.permute(&p);
            }
        }
    }
    let p = random_permutation(rng, n);
    g.permute(&p)
}
