//! Molecular graphs, SMILES, canonical keys and graph statistics.

mod atoms;
mod canon;
mod graph;
mod smiles;
mod stats;

pub use atoms::{AtomRegistry, AtomSpec, HYDROGEN_MASS};
pub use canon::{canonical_key, canonical_key_with_limit, CanonicalKey, DEFAULT_MAX_CANON_NODES};
pub use graph::{Bond, GraphJson, MolecularGraph, BOND_TYPES};
pub use smiles::{emit_smiles, parse_smiles, BuiltinParser, SmilesParser};
pub use stats::{
    clustering_coefficients, degree_histogram, graph_statistics, orbit, orbit_counts,
    GraphStatistics, ORBITS_4,
};

#[derive(Debug, thiserror::Error)]
pub enum ChemError {
    #[error("invalid atom registry: {0}")]
    Registry(String),
    #[error("malformed graph: {0}")]
    Structure(String),
    #[error("SMILES syntax error at {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown element {0}")]
    UnknownElement(String),
    #[error("valence exceeded at atom {atom} ({symbol})")]
    ValenceOverflow { atom: usize, symbol: String },
    #[error("graph has {nodes} nodes, canonicalization is limited to {max}")]
    SizeOverflow { nodes: usize, max: usize },
}
