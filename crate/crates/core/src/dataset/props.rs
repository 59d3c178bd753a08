//! Built-in molecular descriptors.

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::chem::{AtomRegistry, MolecularGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuiltinProperty {
    MolecularWeight,
    HeavyAtomCount,
    LogpAtomContrib,
}

impl BuiltinProperty {
    pub const ALL: [BuiltinProperty; 3] = [
        BuiltinProperty::MolecularWeight,
        BuiltinProperty::HeavyAtomCount,
        BuiltinProperty::LogpAtomContrib,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinProperty::MolecularWeight => "molecular_weight",
            BuiltinProperty::HeavyAtomCount => "heavy_atom_count",
            BuiltinProperty::LogpAtomContrib => "logp_atom_contrib",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn compute(self, g: &MolecularGraph, registry: &AtomRegistry) -> f64 {
        match self {
            BuiltinProperty::MolecularWeight => g.molecular_weight(registry),
            BuiltinProperty::HeavyAtomCount => g.num_atoms() as f64,
            BuiltinProperty::LogpAtomContrib => logp_atom_contrib(g, registry),
        }
    }
}

pub fn compute_property(g: &MolecularGraph, name: &str, registry: &AtomRegistry) -> Result<f64, DatasetError> {
    BuiltinProperty::from_name(name)
        .map(|p| p.compute(g, registry))
        .ok_or_else(|| DatasetError::UnknownProperty(name.to_owned()))
}

/// Heavy-atom classes of the simplified logP table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogpType {
    /// sp3 carbon with only carbon neighbours and at least two hydrogens
    CPrimary,
    /// sp3 carbon with only carbon neighbours and at most one hydrogen
    CBranched,
    /// sp3 carbon attached to a heteroatom
    CHetero,
    /// carbon with a multiple bond, carbon neighbours only
    CUnsaturated,
    /// carbon with a multiple bond and a heteroatom neighbour
    CUnsaturatedHetero,
    NPrimary,
    NSecondary,
    NTertiary,
    NUnsaturated,
    OHydroxyl,
    OEther,
    OCarbonyl,
    F,
    Cl,
    Br,
    I,
    P,
    S,
    Other,
}

impl LogpType {
    pub fn contribution(self) -> f64 {
        match self {
            LogpType::CPrimary => 0.1441,
            LogpType::CBranched => 0.0,
            LogpType::CHetero => -0.2035,
            LogpType::CUnsaturated => 0.1360,
            LogpType::CUnsaturatedHetero => -0.1002,
            LogpType::NPrimary => -1.0190,
            LogpType::NSecondary => -0.7096,
            LogpType::NTertiary => -0.3187,
            LogpType::NUnsaturated => -0.4806,
            LogpType::OHydroxyl => -0.2893,
            LogpType::OEther => -0.0684,
            LogpType::OCarbonyl => -0.1526,
            LogpType::F => 0.4202,
            LogpType::Cl => 0.6895,
            LogpType::Br => 0.8456,
            LogpType::I => 0.8857,
            LogpType::P => 0.8612,
            LogpType::S => 0.6482,
            LogpType::Other => 0.0,
        }
    }
}

/// Contribution of one implicit hydrogen, by the element it sits on.
pub fn hydrogen_contribution(host_symbol: &str) -> f64 {
    match host_symbol {
        "C" => 0.1230,
        "N" => 0.2142,
        "O" => -0.2677,
        _ => 0.0,
    }
}

pub fn logp_type(g: &MolecularGraph, v: usize, registry: &AtomRegistry, adj: &[Vec<(usize, u8)>]) -> LogpType {
    let symbol = registry.symbol(g.atom(v));
    let h = g.implicit_hydrogens(registry)[v];
    let hetero = adj[v].iter().any(|&(u, _)| registry.symbol(g.atom(u)) != "C");
    let multiple = adj[v].iter().any(|&(_, o)| o > 1);
    match symbol {
        "C" => match (multiple, hetero) {
            (true, true) => LogpType::CUnsaturatedHetero,
            (true, false) => LogpType::CUnsaturated,
            (false, true) => LogpType::CHetero,
            (false, false) if h >= 2 => LogpType::CPrimary,
            (false, false) => LogpType::CBranched,
        },
        "N" if multiple => LogpType::NUnsaturated,
        "N" => match h {
            2.. => LogpType::NPrimary,
            1 => LogpType::NSecondary,
            0 => LogpType::NTertiary,
        },
        "O" if multiple => LogpType::OCarbonyl,
        "O" if h >= 1 => LogpType::OHydroxyl,
        "O" => LogpType::OEther,
        "F" => LogpType::F,
        "Cl" => LogpType::Cl,
        "Br" => LogpType::Br,
        "I" => LogpType::I,
        "P" => LogpType::P,
        "S" => LogpType::S,
        _ => LogpType::Other,
    }
}

/// Sum of per-atom contributions, heavy atoms plus their implicit hydrogens.
pub fn logp_atom_contrib(g: &MolecularGraph, registry: &AtomRegistry) -> f64 {
    let adj = g.adjacency();
    let hs = g.implicit_hydrogens(registry);
    (0..g.num_atoms())
        .map(|v| {
            logp_type(g, v, registry, &adj).contribution()
                + hs[v] as f64 * hydrogen_contribution(registry.symbol(g.atom(v)))
        })
        .sum()
}
