//! Kekulized SMILES subset: organic-subset and bracket atoms, `-` `=` `#`
//! bonds, branches and ring closures. Aromatic lowercase atoms, charges,
//! isotopes, stereo marks and `.` are rejected.

use std::collections::HashMap;

use super::{AtomRegistry, ChemError, MolecularGraph};

/// Anything that turns a SMILES line into a graph. Ingestion accepts any
/// implementation, so datasets that need aromaticity perception can plug in
/// an external toolkit.
pub trait SmilesParser {
    fn parse(&self, text: &str, registry: &AtomRegistry) -> Result<MolecularGraph, ChemError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinParser;

impl SmilesParser for BuiltinParser {
    fn parse(&self, text: &str, registry: &AtomRegistry) -> Result<MolecularGraph, ChemError> {
        parse_smiles(text, registry)
    }
}

pub fn parse_smiles(text: &str, registry: &AtomRegistry) -> Result<MolecularGraph, ChemError> {
    Parser::new(text, registry).run()
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    registry: &'a AtomRegistry,
    atoms: Vec<usize>,
    explicit_h: Vec<u32>,
    bonds: Vec<(usize, usize, u8)>,
    rings: HashMap<u32, (usize, Option<u8>, usize)>,
}

impl<'a> Parser<'a> {
    fn new(text: &str, registry: &'a AtomRegistry) -> Self {
        Self {
            chars: text.trim().chars().collect(),
            pos: 0,
            registry,
            atoms: Vec::new(),
            explicit_h: Vec::new(),
            bonds: Vec::new(),
            rings: HashMap::new(),
        }
    }

    fn err(&self, pos: usize, msg: impl Into<String>) -> ChemError {
        ChemError::Syntax {
            pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn run(mut self) -> Result<MolecularGraph, ChemError> {
        if self.chars.is_empty() {
            return Err(self.err(0, "empty SMILES"));
        }
        let mut prev: Option<usize> = None;
        let mut stack: Vec<Option<usize>> = Vec::new();
        let mut pending: Option<(u8, usize)> = None;

        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                '(' => {
                    if prev.is_none() {
                        return Err(self.err(at, "branch before any atom"));
                    }
                    if pending.is_some() {
                        return Err(self.err(at, "bond symbol before '('"));
                    }
                    stack.push(prev);
                    self.pos += 1;
                    if self.peek() == Some(')') {
                        return Err(self.err(self.pos, "empty branch"));
                    }
                }
                ')' => {
                    if pending.is_some() {
                        return Err(self.err(at, "dangling bond"));
                    }
                    prev = stack
                        .pop()
                        .ok_or_else(|| self.err(at, "unbalanced ')'"))?;
                    self.pos += 1;
                }
                '-' | '=' | '#' => {
                    if pending.is_some() {
                        return Err(self.err(at, "two bond symbols in a row"));
                    }
                    if prev.is_none() {
                        return Err(self.err(at, "bond before any atom"));
                    }
                    pending = Some((bond_order(c), at));
                    self.pos += 1;
                }
                ':' | '/' | '\\' | '$' => {
                    return Err(self.err(at, format!("unsupported bond symbol '{c}'")));
                }
                '.' => return Err(self.err(at, "disconnected SMILES ('.') is not supported")),
                '0'..='9' | '%' => {
                    let atom = prev.ok_or_else(|| self.err(at, "ring closure before any atom"))?;
                    let label = self.ring_label()?;
                    let order = pending.take().map(|(o, _)| o);
                    self.ring_bond(atom, label, order, at)?;
                }
                '[' => {
                    let atom = self.bracket_atom()?;
                    self.link(prev, atom, pending.take().map(|(o, _)| o))?;
                    prev = Some(atom);
                }
                _ if c.is_ascii_alphabetic() => {
                    let atom = self.organic_atom()?;
                    self.link(prev, atom, pending.take().map(|(o, _)| o))?;
                    prev = Some(atom);
                }
                _ => return Err(self.err(at, format!("unexpected character '{c}'"))),
            }
        }
        if let Some((_, at)) = pending {
            return Err(self.err(at, "dangling bond"));
        }
        if !stack.is_empty() {
            return Err(self.err(self.chars.len(), "unclosed branch"));
        }
        if let Some((label, &(_, _, at))) = self.rings.iter().min_by_key(|(_, v)| v.2) {
            return Err(self.err(at, format!("unclosed ring {label}")));
        }

        let graph = MolecularGraph::new(self.atoms.clone(), self.bonds.iter().copied())?;
        for ((v, used), h) in graph.bond_order_sums().into_iter().enumerate().zip(&self.explicit_h) {
            let a = graph.atom(v);
            if used + h > self.registry.max_valence(a) as u32 {
                return Err(ChemError::ValenceOverflow {
                    atom: v,
                    symbol: self.registry.symbol(a).to_owned(),
                });
            }
        }
        Ok(graph)
    }

    fn link(&mut self, prev: Option<usize>, atom: usize, order: Option<u8>) -> Result<(), ChemError> {
        if let Some(p) = prev {
            self.add_bond(p, atom, order.unwrap_or(1))?;
        }
        Ok(())
    }

    fn add_bond(&mut self, a: usize, b: usize, order: u8) -> Result<(), ChemError> {
        if a == b {
            return Err(self.err(self.pos, "ring closure onto the same atom"));
        }
        if self
            .bonds
            .iter()
            .any(|&(x, y, _)| (x == a && y == b) || (x == b && y == a))
        {
            return Err(self.err(self.pos, "duplicate bond"));
        }
        self.bonds.push((a, b, order));
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, ChemError> {
        let at = self.pos;
        if self.peek() == Some('%') {
            let digits: String = self.chars.iter().skip(self.pos + 1).take(2).collect();
            if digits.len() != 2 || !digits.chars().all(|d| d.is_ascii_digit()) {
                return Err(self.err(at, "'%' must be followed by two digits"));
            }
            self.pos += 3;
            Ok(digits.parse().expect("two ascii digits"))
        } else {
            let d = self.peek().and_then(|c| c.to_digit(10)).expect("caller checked");
            self.pos += 1;
            Ok(d)
        }
    }

    fn ring_bond(&mut self, atom: usize, label: u32, order: Option<u8>, at: usize) -> Result<(), ChemError> {
        match self.rings.remove(&label) {
            None => {
                self.rings.insert(label, (atom, order, at));
                Ok(())
            }
            Some((other, open_order, _)) => {
                let order = match (open_order, order) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(self.err(at, format!("conflicting bond orders on ring {label}")))
                    }
                    (a, b) => a.or(b).unwrap_or(1),
                };
                self.add_bond(other, atom, order)
            }
        }
    }

    fn element(&self, symbol: &str, at: usize) -> Result<usize, ChemError> {
        if symbol.chars().next().is_some_and(|c| c.is_ascii_lowercase()) {
            return Err(self.err(
                at,
                format!("aromatic atom '{symbol}'; kekulize the input first"),
            ));
        }
        self.registry
            .index_of(symbol)
            .ok_or_else(|| ChemError::UnknownElement(symbol.to_owned()))
    }

    fn push_atom(&mut self, a: usize, h: u32) -> usize {
        self.atoms.push(a);
        self.explicit_h.push(h);
        self.atoms.len() - 1
    }

    fn organic_atom(&mut self) -> Result<usize, ChemError> {
        let at = self.pos;
        let c = self.chars[self.pos];
        let two: String = self.chars.iter().skip(self.pos).take(2).collect();
        let symbol = if two == "Cl" || two == "Br" {
            self.pos += 2;
            two
        } else {
            self.pos += 1;
            c.to_string()
        };
        let a = self.element(&symbol, at)?;
        Ok(self.push_atom(a, 0))
    }

    fn bracket_atom(&mut self) -> Result<usize, ChemError> {
        let open = self.pos;
        let close = self.chars[open..]
            .iter()
            .position(|&c| c == ']')
            .map(|p| open + p)
            .ok_or_else(|| self.err(open, "unclosed '['"))?;
        let body: Vec<char> = self.chars[open + 1..close].to_vec();
        self.pos = close + 1;

        let mut i = 0;
        if body.first().is_some_and(|c| c.is_ascii_digit()) {
            return Err(self.err(open + 1, "isotopes are not supported"));
        }
        let start = i;
        if body.get(i).is_some_and(|c| c.is_ascii_alphabetic()) {
            i += 1;
            if body.get(i).is_some_and(|c| c.is_ascii_lowercase()) && body[start].is_ascii_uppercase() {
                i += 1;
            }
        }
        let symbol: String = body[start..i].iter().collect();
        if symbol.is_empty() {
            return Err(self.err(open + 1, "missing element symbol"));
        }
        let mut hydrogens = 0u32;
        if body.get(i) == Some(&'H') {
            i += 1;
            hydrogens = 1;
            if let Some(d) = body.get(i).and_then(|c| c.to_digit(10)) {
                hydrogens = d;
                i += 1;
            }
        }
        if let Some(&c) = body.get(i) {
            let msg = match c {
                '@' => "stereo marks are not supported",
                '+' | '-' => "charges are not supported",
                ':' => "atom classes are not supported",
                _ => "unexpected character in bracket atom",
            };
            return Err(self.err(open + 1 + i, msg));
        }
        let a = self.element(&symbol, open + 1)?;
        Ok(self.push_atom(a, hydrogens))
    }
}

fn bond_order(c: char) -> u8 {
    match c {
        '=' => 2,
        '#' => 3,
        _ => 1,
    }
}

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

/// Depth-first SMILES writer. Every non-tree edge becomes a ring closure.
/// Only the component containing node 0 is written; valid graphs are connected.
pub fn emit_smiles(g: &MolecularGraph, registry: &AtomRegistry) -> String {
    if g.num_atoms() == 0 {
        return String::new();
    }
    let adj = g.adjacency();
    let n = g.num_atoms();

    // DFS to fix the spanning tree and visit order.
    let mut order = vec![usize::MAX; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut counter = 0;
    let mut stack = vec![(0usize, usize::MAX)];
    while let Some((v, parent)) = stack.pop() {
        if order[v] != usize::MAX {
            continue;
        }
        order[v] = counter;
        counter += 1;
        if parent != usize::MAX {
            children[parent].push(v);
        }
        for &(u, _) in adj[v].iter().rev() {
            if order[u] == usize::MAX {
                stack.push((u, v));
            }
        }
    }
    let is_tree = |a: usize, b: usize| children[a].contains(&b) || children[b].contains(&a);

    // Ring-closure events per node: (partner, order), opened at the endpoint
    // visited first.
    let mut opens: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    let mut closes: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    for b in g.bonds() {
        if order[b.i] == usize::MAX || is_tree(b.i, b.j) {
            continue;
        }
        let (first, second) = if order[b.i] < order[b.j] { (b.i, b.j) } else { (b.j, b.i) };
        opens[first].push((second, b.order));
        closes[second].push((first, b.order));
    }

    let mut out = String::new();
    let mut free: Vec<bool> = vec![true; 100];
    let mut label_of: HashMap<(usize, usize), usize> = HashMap::new();

    fn ring_text(label: usize) -> String {
        if label < 10 {
            label.to_string()
        } else {
            format!("%{label:02}")
        }
    }

    // Iterative writer: frames are (node, incoming order, closing-paren flag).
    enum Step {
        Atom(usize, u8),
        Text(&'static str),
    }
    let mut todo = vec![Step::Atom(0, 1)];
    while let Some(step) = todo.pop() {
        let (v, incoming) = match step {
            Step::Text(t) => {
                out.push_str(t);
                continue;
            }
            Step::Atom(v, o) => (v, o),
        };
        out.push_str(bond_symbol(incoming));
        out.push_str(registry.symbol(g.atom(v)));
        for &(partner, _) in &closes[v] {
            let label = label_of.remove(&(partner, v)).expect("ring opened before close");
            out.push_str(&ring_text(label));
            free[label] = true;
        }
        for &(partner, bo) in &opens[v] {
            let label = (1..100).find(|&l| free[l]).expect("fewer than 99 open rings");
            free[label] = false;
            label_of.insert((v, partner), label);
            out.push_str(bond_symbol(bo));
            out.push_str(&ring_text(label));
        }
        let kids = &children[v];
        for (idx, &c) in kids.iter().enumerate().rev() {
            let bo = g.bond_order(v, c).expect("tree edge");
            if idx + 1 == kids.len() {
                todo.push(Step::Atom(c, bo));
            } else {
                todo.push(Step::Text(")"));
                todo.push(Step::Atom(c, bo));
                todo.push(Step::Text("("));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::canonical_key;

    fn reg() -> AtomRegistry {
        AtomRegistry::qm9()
    }

    fn bonds(g: &MolecularGraph) -> Vec<(usize, usize, u8)> {
        g.bonds().iter().map(|b| (b.i, b.j, b.order)).collect()
    }

    #[test]
    fn methanol() {
        let g = parse_smiles("CO", &reg()).unwrap();
        assert_eq!(g.atoms(), &[0, 2]);
        assert_eq!(bonds(&g), vec![(0, 1, 1)]);
    }

    #[test]
    fn carbon_dioxide() {
        let g = parse_smiles("O=C=O", &reg()).unwrap();
        assert_eq!(g.num_atoms(), 3);
        assert_eq!(bonds(&g), vec![(0, 1, 2), (1, 2, 2)]);
        assert_eq!(g.bond_order_sums()[1], 4);
    }

    #[test]
    fn cyclopropane() {
        let g = parse_smiles("C1CC1", &reg()).unwrap();
        assert_eq!(bonds(&g), vec![(0, 1, 1), (0, 2, 1), (1, 2, 1)]);
        assert!(g.is_valid(&reg()));
    }

    #[test]
    fn branches_and_brackets() {
        let g = parse_smiles("CC(=O)[NH]C(F)(F)F", &reg()).unwrap();
        assert_eq!(g.num_atoms(), 8);
        assert_eq!(g.bond_order(1, 2), Some(2));
        assert_eq!(g.degrees()[4], 4);
        let zinc = AtomRegistry::zinc();
        let g = parse_smiles("ClC1=CC=C(Br)C=C1", &zinc).unwrap();
        assert_eq!(zinc.symbol(g.atom(0)), "Cl");
        assert_eq!(zinc.symbol(g.atom(5)), "Br");
    }

    #[test]
    fn ring_bond_orders_and_percent_labels() {
        let g = parse_smiles("C=1CCC1", &reg()).unwrap();
        assert_eq!(g.bond_order(0, 3), Some(2));
        let g = parse_smiles("C%12CC%12", &reg()).unwrap();
        assert_eq!(g.bonds().len(), 3);
        assert!(parse_smiles("C=1CCC#1", &reg()).is_err());
    }

    #[test]
    fn rejected_inputs() {
        let r = reg();
        assert!(matches!(parse_smiles("c1ccccc1", &r), Err(ChemError::Syntax { pos: 0, .. })));
        assert!(matches!(parse_smiles("CS", &r), Err(ChemError::UnknownElement(s)) if s == "S"));
        assert!(matches!(parse_smiles("C#N#C", &r), Err(ChemError::ValenceOverflow { atom: 1, .. })));
        assert!(matches!(parse_smiles("C.C", &r), Err(ChemError::Syntax { pos: 1, .. })));
        assert!(matches!(parse_smiles("C(C", &r), Err(ChemError::Syntax { .. })));
        assert!(matches!(parse_smiles("C1CC", &r), Err(ChemError::Syntax { pos: 1, .. })));
        assert!(matches!(parse_smiles("[NH4+]", &r), Err(ChemError::Syntax { .. })));
        assert!(matches!(parse_smiles("[13C]", &r), Err(ChemError::Syntax { .. })));
        assert!(matches!(parse_smiles("F/C=C/F", &r), Err(ChemError::Syntax { pos: 1, .. })));
        assert!(matches!(parse_smiles("[CH5]", &r), Err(ChemError::ValenceOverflow { .. })));
        assert!(matches!(parse_smiles("", &r), Err(ChemError::Syntax { .. })));
        assert!(matches!(parse_smiles("C=", &r), Err(ChemError::Syntax { pos: 1, .. })));
    }

    #[test]
    fn emit_simple() {
        let r = reg();
        assert_eq!(emit_smiles(&MolecularGraph::single_atom(0), &r), "C");
        let co = MolecularGraph::new(vec![0, 2], [(0, 1, 2)]).unwrap();
        assert_eq!(emit_smiles(&co, &r), "C=O");
    }

    #[test]
    fn emit_round_trips_rings() {
        let r = reg();
        for smi in ["C1CC1", "C1=CC=CC=C1", "C12CC1C2", "OC1C2CC3C1N23", "C#CC1(O)CC1=O"] {
            let g = parse_smiles(smi, &r).unwrap();
            let back = parse_smiles(&emit_smiles(&g, &r), &r).unwrap();
            assert_eq!(
                canonical_key(&back, &r).unwrap(),
                canonical_key(&g, &r).unwrap(),
                "{smi}"
            );
        }
    }
}
