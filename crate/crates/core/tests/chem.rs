mod common;

use common::*;
use mdvae::chem::*;
use proptest::prelude::*;

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn key_is_permutation_invariant(seed in any::<u64>()) {
        let r = AtomRegistry::qm9();
        let mut rng = rng(seed);
        let g = random_valid_graph(&mut rng, 12, &r);
        let p = random_permutation(&mut rng, g.num_atoms());
        prop_assert_eq!(canonical_key(&g, &r).unwrap(), canonical_key(&g.permute(&p), &r).unwrap());
    }

    #[test]
    fn emit_then_parse_is_isomorphic(seed in any::<u64>()) {
        let r = AtomRegistry::qm9();
        let g = random_valid_graph(&mut rng(seed), 12, &r);
        let text = emit_smiles(&g, &r);
        let back = parse_smiles(&text, &r).unwrap();
        prop_assert!(isomorphic(&g, &back), "{}", text);
    }

    #[test]
    fn statistics_are_well_formed(seed in any::<u64>()) {
        let r = AtomRegistry::qm9();
        let g = random_valid_graph(&mut rng(seed), 12, &r);
        let s = graph_statistics(&g);
        prop_assert_eq!(s.degree_histogram.iter().sum::<usize>(), g.num_atoms());
        prop_assert!(s.clustering.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn bond_removal_keeps_valence(seed in any::<u64>()) {
        let r = AtomRegistry::qm9();
        let mut rng = rng(seed);
        let g = random_valid_graph(&mut rng, 12, &r);
        for b in g.bonds() {
            let h = g.remove_bond(b.i, b.j);
            if h.is_connected() {
                prop_assert!(h.is_valid(&r));
            }
        }
    }
}

#[test]
fn key_equality_matches_isomorphism_oracle() {
    let r = AtomRegistry::qm9();
    let mut rng = rng(9);
    let (mut iso, mut disagreements) = (0, 0);
    for i in 0..1000 {
        let g = random_valid_graph(&mut rng, 9, &r);
        let h = match i % 3 {
            0 => {
                let p = random_permutation(&mut rng, g.num_atoms());
                g.permute(&p)
            }
            1 => near_miss(&mut rng, &g, &r),
            _ => random_valid_graph(&mut rng, 9, &r),
        };
        let same_key = canonical_key(&g, &r).unwrap() == canonical_key(&h, &r).unwrap();
        let oracle = isomorphic(&g, &h);
        iso += oracle as usize;
        disagreements += (same_key != oracle) as usize;
    }
    assert_eq!(disagreements, 0);
    assert!(iso > 300 && iso < 800, "pair mix is degenerate: {iso} isomorphic");
}

#[test]
fn key_separates_tricky_carbon_skeletons() {
    // All-carbon graphs with many ties, compared against the oracle.
    let r = AtomRegistry::qm9();
    let mut rng = rng(31);
    for _ in 0..300 {
        let g = random_topology(&mut rng, 8, 0.35);
        let h = random_topology(&mut rng, 8, 0.35);
        let same = canonical_key(&g, &r).unwrap() == canonical_key(&h, &r).unwrap();
        assert_eq!(same, isomorphic(&g, &h));
    }
}

#[test]
fn orbit_counts_match_template_oracle() {
    let mut rng = rng(4);
    for i in 0..200 {
        let n = 4 + i % 9;
        let p = [0.2, 0.4, 0.7][i % 3];
        let g = random_topology(&mut rng, n, p);
        assert_eq!(orbit_counts(&g), orbit_oracle(&g), "graph {i}");
    }
}

#[test]
fn four_cycle_orbits() {
    let g = MolecularGraph::new(vec![0; 4], [(0, 1, 1), (1, 2, 1), (2, 3, 1), (0, 3, 1)]).unwrap();
    let s = graph_statistics(&g);
    assert_eq!(orbit_counts(&g), orbit_oracle(&g));
    assert!(s.orbit_counts.iter().all(|c| c[orbit::CYCLE] == 1 && c.iter().sum::<u64>() == 1));
    let tri = parse_smiles("C1CC1", &AtomRegistry::qm9()).unwrap();
    assert_eq!(clustering_coefficients(&tri), vec![1.0; 3]);
}

#[derive(serde::Deserialize)]
struct Reference {
    smiles: String,
    heavy_atoms: usize,
    bonds: usize,
    bond_order_sum: u32,
    implicit_h: u32,
}

#[test]
fn parser_agrees_with_external_toolkit() {
    let r = AtomRegistry::qm9();
    let mut reader = csv::Reader::from_path(format!("{DATA}/qm9_style_1k.rdkit.csv")).unwrap();
    let mut rows = 0;
    for row in reader.deserialize::<Reference>() {
        let row = row.unwrap();
        let g = parse_smiles(&row.smiles, &r).unwrap_or_else(|e| panic!("{}: {e}", row.smiles));
        assert!(g.is_valid(&r), "{}", row.smiles);
        assert_eq!(g.num_atoms(), row.heavy_atoms, "{}", row.smiles);
        assert_eq!(g.bonds().len(), row.bonds, "{}", row.smiles);
        let orders: u32 = g.bonds().iter().map(|b| b.order as u32).sum();
        assert_eq!(orders, row.bond_order_sum, "{}", row.smiles);
        assert_eq!(g.implicit_hydrogens(&r).iter().sum::<u32>(), row.implicit_h, "{}", row.smiles);
        let back = parse_smiles(&emit_smiles(&g, &r), &r).unwrap();
        assert_eq!(canonical_key(&back, &r).unwrap(), canonical_key(&g, &r).unwrap());
        rows += 1;
    }
    assert_eq!(rows, 1000);
    // Three-membered ring from the same toolkit's reading of C1CC1.
    let g = parse_smiles("C1CC1", &r).unwrap();
    assert_eq!(g.bonds().len(), 3);
    assert_eq!(g.implicit_hydrogens(&r), vec![2, 2, 2]);
}

#[test]
fn zinc_sample_parses() {
    let r = AtomRegistry::zinc();
    let mut reader = csv::Reader::from_path(format!("{DATA}/zinc_sample.csv")).unwrap();
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let g = parse_smiles(&rec[0], &r).unwrap_or_else(|e| panic!("{}: {e}", &rec[0]));
        assert!(g.is_valid(&r));
        n += 1;
    }
    assert_eq!(n, 200);
}
