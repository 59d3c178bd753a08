//! Valence-masked breadth-first graph decoder.
//!
//! Every molecule is generated by the same sequence of choices: one atom
//! type per latent row, then for each node taken from a FIFO queue (seeded
//! with node 0) a run of edge decisions ending in STOP. A decision is an
//! index into the flattened `candidate × bond order` score vector, with STOP
//! appended last.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamId, Tape, Tensor, Var};
use crate::chem::{AtomRegistry, MolecularGraph, BOND_TYPES};
use crate::encoder::{one_hot, GgnnIds};
use crate::model::{bond_edges, Init, Model, ModelError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecoderError {
    #[error("decision {step} is illegal: {msg}")]
    Illegal { step: usize, msg: String },
    #[error("latents have {got} columns, model expects {expected}")]
    Latents { expected: usize, got: usize },
    #[error("graph and latents disagree: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderIds {
    type_w: ParamId,
    type_b: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    ggnn: GgnnIds,
    focus_w: ParamId,
    cand_w: ParamId,
    mean_w: ParamId,
    pair_b: ParamId,
    edge_w: ParamId,
    label_w: ParamId,
    label_b: ParamId,
    stop_w1: ParamId,
    stop_b1: ParamId,
    stop_w2: ParamId,
    stop_b2: ParamId,
}

impl DecoderIds {
    pub(crate) fn build(init: &mut Init<'_>, k: usize, h: usize, l: usize) -> Result<Self, ModelError> {
        Ok(Self {
            type_w: init.glorot("dec.type.w", l, k)?,
            type_b: init.zeros("dec.type.b", 1, k)?,
            init_w: init.glorot("dec.init.w", l + k, h)?,
            init_b: init.zeros("dec.init.b", 1, h)?,
            ggnn: GgnnIds::build(init, "dec.ggnn", h)?,
            focus_w: init.glorot("dec.pair.focus", h, h)?,
            cand_w: init.glorot("dec.pair.cand", h, h)?,
            mean_w: init.glorot("dec.pair.mean", h, h)?,
            pair_b: init.zeros("dec.pair.b", 1, h)?,
            edge_w: init.glorot("dec.edge.w", h, 1)?,
            label_w: init.glorot("dec.label.w", h, BOND_TYPES)?,
            label_b: init.zeros("dec.label.b", 1, BOND_TYPES)?,
            stop_w1: init.glorot("dec.stop.w1", 2 * h, h)?,
            stop_b1: init.zeros("dec.stop.b1", 1, h)?,
            stop_w2: init.glorot("dec.stop.w2", h, 1)?,
            stop_b2: init.zeros("dec.stop.b2", 1, 1)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Bond from the focus to `node` with bond order `order` (1..=3).
    Edge { node: usize, order: u8 },
    Stop,
}

impl Decision {
    /// Position in the score vector of an `n`-node state.
    pub fn index(self, n: usize) -> usize {
        match self {
            Decision::Edge { node, order } => node * BOND_TYPES + order as usize - 1,
            Decision::Stop => n * BOND_TYPES,
        }
    }

    pub fn from_index(i: usize, n: usize) -> Self {
        if i == n * BOND_TYPES {
            Decision::Stop
        } else {
            Decision::Edge { node: i / BOND_TYPES, order: (i % BOND_TYPES + 1) as u8 }
        }
    }
}

/// Partial molecule under construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub atoms: Vec<usize>,
    /// (focus, other, order) in the order bonds were added.
    pub bonds: Vec<(usize, usize, u8)>,
    pub remaining_valence: Vec<u32>,
    pub queue: VecDeque<usize>,
    pub connected: Vec<bool>,
    pub expanded: Vec<bool>,
    order: Vec<Vec<u8>>,
}

impl DecoderState {
    pub fn new(atoms: Vec<usize>, registry: &AtomRegistry) -> Self {
        let n = atoms.len();
        let remaining_valence = atoms.iter().map(|&a| registry.max_valence(a) as u32).collect();
        let mut connected = vec![false; n];
        let mut queue = VecDeque::new();
        if n > 0 {
            connected[0] = true;
            queue.push_back(0);
        }
        Self {
            atoms,
            bonds: Vec::new(),
            remaining_valence,
            queue,
            connected,
            expanded: vec![false; n],
            order: vec![vec![0; n]; n],
        }
    }

    /// A state that already holds `bonds`, with node 0's component marked
    /// connected and node 0 at the head of the queue.
    pub fn from_partial(
        atoms: Vec<usize>,
        bonds: &[(usize, usize, u8)],
        registry: &AtomRegistry,
    ) -> Result<Self, String> {
        let mut state = Self::new(atoms, registry);
        let n = state.num_nodes();
        for &(a, b, order) in bonds {
            if a >= n || b >= n || a == b || state.has_bond(a, b) || !(1..=3).contains(&order) {
                return Err(format!("bad bond ({a},{b},{order})"));
            }
            let o = order as u32;
            if state.remaining_valence[a] < o || state.remaining_valence[b] < o {
                return Err(format!("bond ({a},{b},{order}) exceeds a valence"));
            }
            state.bonds.push((a, b, order));
            state.order[a][b] = order;
            state.order[b][a] = order;
            state.remaining_valence[a] -= o;
            state.remaining_valence[b] -= o;
        }
        if n > 0 {
            for v in state.graph_full().component_of(0) {
                state.connected[v] = true;
            }
        }
        Ok(state)
    }

    fn graph_full(&self) -> MolecularGraph {
        MolecularGraph::new(self.atoms.clone(), self.bonds.iter().copied()).expect("decoder only places simple bonds")
    }

    pub fn num_nodes(&self) -> usize {
        self.atoms.len()
    }

    pub fn focus(&self) -> Option<usize> {
        self.queue.front().copied()
    }

    pub fn has_bond(&self, a: usize, b: usize) -> bool {
        self.order[a][b] != 0
    }

    /// Apply a decision for the current focus. Fails when the mask forbids it.
    pub fn apply(&mut self, d: Decision) -> Result<(), String> {
        let focus = self.focus().ok_or("queue is empty")?;
        let mask = legal_edge_mask(self, focus);
        if !mask[d.index(self.num_nodes())] {
            return Err(format!("{d:?} masked for focus {focus}"));
        }
        match d {
            Decision::Stop => {
                self.queue.pop_front();
                self.expanded[focus] = true;
            }
            Decision::Edge { node, order } => {
                self.bonds.push((focus, node, order));
                self.order[focus][node] = order;
                self.order[node][focus] = order;
                self.remaining_valence[focus] -= order as u32;
                self.remaining_valence[node] -= order as u32;
                if !self.connected[node] {
                    self.connected[node] = true;
                    self.queue.push_back(node);
                }
            }
        }
        Ok(())
    }

    /// Both-direction message edges of the bonds placed so far.
    fn message_edges(&self) -> Vec<(usize, usize, usize)> {
        bond_edges(self.bonds.iter().copied())
    }

    /// The component containing node 0, renumbered in index order.
    pub fn graph(&self) -> MolecularGraph {
        let full = self.graph_full();
        full.induced(&full.component_of(0))
    }
}

/// Legal decisions for `focus`, indexed as [`Decision::index`]. STOP is
/// always legal.
pub fn legal_edge_mask(state: &DecoderState, focus: usize) -> Vec<bool> {
    let n = state.num_nodes();
    let mut mask = vec![false; n * BOND_TYPES + 1];
    let rf = state.remaining_valence[focus];
    for u in 0..n {
        if u == focus || state.has_bond(focus, u) {
            continue;
        }
        let cap = rf.min(state.remaining_valence[u]);
        for k in 1..=BOND_TYPES {
            mask[u * BOND_TYPES + k - 1] = k as u32 <= cap;
        }
    }
    mask[n * BOND_TYPES] = true;
    mask
}

/// The decision sequence that rebuilds `g` from node 0: per focus, its
/// bonds to higher-numbered partners not yet placed, in increasing partner
/// order, then STOP.
pub fn teacher_decisions(g: &MolecularGraph) -> Vec<Decision> {
    let n = g.num_atoms();
    let adj = g.adjacency();
    let mut placed = vec![vec![false; n]; n];
    let mut connected = vec![false; n];
    let mut queue = VecDeque::from([0]);
    connected[0] = true;
    let mut out = Vec::new();
    while let Some(f) = queue.pop_front() {
        let mut nbrs = adj[f].clone();
        nbrs.sort_unstable();
        for (u, order) in nbrs {
            if placed[f][u] {
                continue;
            }
            placed[f][u] = true;
            placed[u][f] = true;
            out.push(Decision::Edge { node: u, order });
            if !connected[u] {
                connected[u] = true;
                queue.push_back(u);
            }
        }
        out.push(Decision::Stop);
    }
    out
}

/// Execute `decisions` on fresh atoms; the result must end with an empty queue.
pub fn replay(atoms: Vec<usize>, decisions: &[Decision], registry: &AtomRegistry) -> Result<MolecularGraph, DecoderError> {
    let mut state = DecoderState::new(atoms, registry);
    for (step, &d) in decisions.iter().enumerate() {
        state.apply(d).map_err(|msg| DecoderError::Illegal { step, msg })?;
    }
    if !state.queue.is_empty() {
        return Err(DecoderError::Illegal { step: decisions.len(), msg: "sequence ended before the queue emptied".into() });
    }
    Ok(state.graph())
}

impl Model {
    /// Atom type logits, n×K.
    fn type_logits(&self, tape: &mut Tape, b: &Bound, z: Var) -> Var {
        let ids = &self.dec;
        let t = tape.matmul(z, b.var(ids.type_w));
        tape.add_row(t, b.var(ids.type_b))
    }

    fn initial_states(&self, tape: &mut Tape, b: &Bound, z: Var, atoms: &[usize]) -> Var {
        let ids = &self.dec;
        let x = tape.leaf(one_hot(atoms, self.num_types()));
        let zx = tape.concat_cols(&[z, x]);
        let h = tape.matmul(zx, b.var(ids.init_w));
        let h = tape.add_row(h, b.var(ids.init_b));
        tape.relu(h)
    }

    /// Log-probabilities of every decision for `focus`, as a 1×(3n+1) row.
    fn decision_log_probs(&self, tape: &mut Tape, b: &Bound, s: Var, focus: usize, mask: &[bool]) -> Var {
        let ids = &self.dec;
        let n = tape.value(s).rows;
        let sv = tape.select_rows(s, &[focus]);
        let smean = tape.mean_rows(s);

        let a = tape.matmul(sv, b.var(ids.focus_w));
        let c = tape.matmul(smean, b.var(ids.mean_w));
        let ctx = tape.add(a, c);
        let ctx = tape.add(ctx, b.var(ids.pair_b));
        let cand = tape.matmul(s, b.var(ids.cand_w));
        let pair = tape.add_row(cand, ctx);
        let pair = tape.relu(pair);

        let edge = tape.matmul(pair, b.var(ids.edge_w));
        let ones = tape.leaf(Tensor::filled(1, BOND_TYPES, 1.0));
        let edge = tape.matmul(edge, ones);
        let label = tape.matmul(pair, b.var(ids.label_w));
        let label = tape.add_row(label, b.var(ids.label_b));
        let joint = tape.add(edge, label);
        let flat = tape.reshape(joint, 1, n * BOND_TYPES);

        let st = tape.concat_cols(&[sv, smean]);
        let st = tape.matmul(st, b.var(ids.stop_w1));
        let st = tape.add(st, b.var(ids.stop_b1));
        let st = tape.relu(st);
        let stop = tape.matmul(st, b.var(ids.stop_w2));
        let stop = tape.add(stop, b.var(ids.stop_b2));

        let logits = tape.concat_cols(&[flat, stop]);
        tape.masked_log_softmax(logits, mask)
    }

    fn check_latents(&self, z: &Tensor) -> Result<(), DecoderError> {
        if z.cols != self.config.latent {
            return Err(DecoderError::Latents { expected: self.config.latent, got: z.cols });
        }
        Ok(())
    }
}

/// Teacher-forced negative log-likelihood of `g` given per-node latents
/// `z` (n×L, a tape variable), as a 1×1 tape variable.
pub fn reconstruction_nll_var(model: &Model, tape: &mut Tape, b: &Bound, g: &MolecularGraph, z: Var) -> Var {
    let n = g.num_atoms();
    let mut terms = Vec::new();

    let logits = model.type_logits(tape, b, z);
    let all = vec![true; model.num_types()];
    for (v, &a) in g.atoms().iter().enumerate() {
        let row = tape.select_rows(logits, &[v]);
        let lp = tape.masked_log_softmax(row, &all);
        terms.push(tape.pick(lp, a));
    }

    let h0 = model.initial_states(tape, b, z, g.atoms());
    let ggnn = &model.dec.ggnn;
    let steps = model.config.steps;
    let mut state = DecoderState::new(g.atoms().to_vec(), &model.registry);
    let mut s = ggnn.propagate(tape, b, h0, &[], steps);
    for d in teacher_decisions(g) {
        let focus = state.focus().expect("teacher sequence follows the queue");
        let mask = legal_edge_mask(&state, focus);
        let lp = model.decision_log_probs(tape, b, s, focus, &mask);
        terms.push(tape.pick(lp, d.index(n)));
        state.apply(d).expect("teacher decisions of a valid graph are legal");
        if matches!(d, Decision::Edge { .. }) {
            s = ggnn.propagate(tape, b, h0, &state.message_edges(), steps);
        }
    }

    let row = tape.concat_cols(&terms);
    let total = tape.sum_all(row);
    tape.scale(total, -1.0)
}

/// [`reconstruction_nll_var`] evaluated without gradients.
pub fn reconstruction_nll(model: &Model, g: &MolecularGraph, z: &Tensor) -> Result<f64, DecoderError> {
    model.check_latents(z)?;
    if z.rows != g.num_atoms() {
        return Err(DecoderError::Alignment(format!("{} latent rows for {} atoms", z.rows, g.num_atoms())));
    }
    if !g.is_valid(&model.registry) {
        return Err(DecoderError::Alignment("graph is not a valid molecule".into()));
    }
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let out = reconstruction_nll_var(model, &mut tape, &b, g, zv);
    Ok(tape.scalar(out))
}

/// Pick an index among the legal entries of a log-probability row.
/// Temperature 0 takes the first maximum.
fn choose(lp: &[f64], mask: &[bool], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let legal = || lp.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m).map(|(i, (&x, _))| (i, x));
    let (best, max) = legal().fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    if temperature <= 0.0 || best == usize::MAX {
        return best;
    }
    let weights: Vec<(usize, f64)> = legal().map(|(i, x)| (i, ((x - max) / temperature).exp())).collect();
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut r = rng.random::<f64>() * total;
    for &(i, w) in &weights {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.last().map(|w| w.0).unwrap_or(best)
}

/// Generate a molecule from per-node latents `z` (n×L, n ≥ 1). The output
/// always satisfies the valence rules and is connected.
pub fn decode_sample(model: &Model, z: &Tensor, temperature: f64, seed: u64) -> Result<MolecularGraph, DecoderError> {
    model.check_latents(z)?;
    if z.rows == 0 {
        return Err(DecoderError::Alignment("no latent rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let zv = tape.leaf(z.clone());

    let logits = model.type_logits(&mut tape, &b, zv);
    let k = model.num_types();
    let all = vec![true; k];
    let mut atoms = Vec::with_capacity(z.rows);
    for v in 0..z.rows {
        let row = tape.select_rows(logits, &[v]);
        let lp = tape.masked_log_softmax(row, &all);
        atoms.push(choose(&tape.value(lp).data, &all, temperature, &mut rng));
    }

    let h0 = model.initial_states(&mut tape, &b, zv, &atoms);
    let mark = tape.len();
    let ggnn = &model.dec.ggnn;
    let steps = model.config.steps;
    let mut state = DecoderState::new(atoms, &model.registry);
    let mut s_value = {
        let s = ggnn.propagate(&mut tape, &b, h0, &[], steps);
        tape.value(s).clone()
    };
    while let Some(focus) = state.focus() {
        tape.truncate(mark);
        let s = tape.leaf(s_value.clone());
        let mask = legal_edge_mask(&state, focus);
        let lp = model.decision_log_probs(&mut tape, &b, s, focus, &mask);
        let idx = choose(&tape.value(lp).data, &mask, temperature, &mut rng);
        let d = Decision::from_index(idx, state.num_nodes());
        state.apply(d).expect("chosen among legal decisions");
        if matches!(d, Decision::Edge { .. }) {
            tape.truncate(mark);
            let s = ggnn.propagate(&mut tape, &b, h0, &state.message_edges(), steps);
            s_value = tape.value(s).clone();
        }
    }
    Ok(state.graph())
}
