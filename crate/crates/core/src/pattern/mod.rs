//! Subgraph patterns and the matching predicate. A pattern is a connected
//! graph of constraint nodes; matching enumerates every injective embedding
//! into a molecule (automorphic images included — dedup happens downstream
//! on the reactant sets they produce).
//!
//! The pattern dialect is the molecule grammar plus `*` (wildcard atom) and
//! `~` (wildcard bond). Constraints are conjunctive; anything a pattern does
//! not write is not constrained, so molecule atoms may always have more
//! structure than the pattern demands. There is no disjunction, negation,
//! recursion or ring-membership primitive; see `docs/notation.md`.

use crate::chem::canon;
use crate::chem::notation::{self, Mode, NotationView, RawBondKind};
use crate::chem::{Atom, BondOrder, Element, MolGraph, ParseError, MAX_CHARGE, MIN_CHARGE};

/// Constraint set for one pattern node. `None` fields match anything.
/// `hcount` doubles as the instantiation value for atoms a rewrite creates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatternNode {
    pub element: Option<Element>,
    pub aromatic: Option<bool>,
    pub charge: Option<i8>,
    pub hcount: Option<u8>,
    pub map_label: Option<u32>,
}

impl PatternNode {
    pub fn wildcard() -> PatternNode {
        PatternNode {
            element: None,
            aromatic: None,
            charge: None,
            hcount: None,
            map_label: None,
        }
    }

    /// Conjunction of all written constraints against a molecule atom.
    pub fn matches(&self, atom: &Atom) -> bool {
        self.element.map_or(true, |e| e == atom.element)
            && self.aromatic.map_or(true, |a| a == atom.aromatic)
            && self.charge.map_or(true, |c| c == atom.formal_charge)
            && self.hcount.map_or(true, |h| h == atom.explicit_h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondConstraint {
    Any,
    Order(BondOrder),
}

impl BondConstraint {
    pub fn matches(&self, order: BondOrder) -> bool {
        match self {
            BondConstraint::Any => true,
            BondConstraint::Order(o) => *o == order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternEdge {
    pub a: usize,
    pub b: usize,
    pub constraint: BondConstraint,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PatternError {
    #[error("pattern must be a single connected fragment")]
    Disconnected,
    #[error("pattern edge endpoint out of range")]
    EndpointOutOfRange,
    #[error("self-loop in pattern")]
    SelfLoop,
    #[error("duplicate pattern edge")]
    DuplicateEdge,
    #[error("charge constraint outside [{MIN_CHARGE},{MAX_CHARGE}]")]
    ChargeOutOfRange,
    #[error("duplicate map label {0} in pattern")]
    DuplicateMapLabel(u32),
}

/// A connected subgraph pattern. Multi-fragment patterns are lists of
/// `PatternGraph` at the template level, never one disconnected graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternGraph {
    nodes: Vec<PatternNode>,
    edges: Vec<PatternEdge>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl PatternGraph {
    pub fn new(nodes: Vec<PatternNode>, edges: Vec<PatternEdge>) -> Result<PatternGraph, PatternError> {
        let n = nodes.len();
        for node in &nodes {
            if let Some(c) = node.charge {
                if !(MIN_CHARGE..=MAX_CHARGE).contains(&c) {
                    return Err(PatternError::ChargeOutOfRange);
                }
            }
        }
        let mut seen_maps = std::collections::HashSet::new();
        for node in &nodes {
            if let Some(m) = node.map_label {
                if !seen_maps.insert(m) {
                    return Err(PatternError::DuplicateMapLabel(m));
                }
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut pairs = std::collections::HashSet::new();
        for (i, e) in edges.iter().enumerate() {
            if e.a >= n || e.b >= n {
                return Err(PatternError::EndpointOutOfRange);
            }
            if e.a == e.b {
                return Err(PatternError::SelfLoop);
            }
            if !pairs.insert((e.a.min(e.b), e.a.max(e.b))) {
                return Err(PatternError::DuplicateEdge);
            }
            adjacency[e.a].push((e.b, i));
            adjacency[e.b].push((e.a, i));
        }
        let g = PatternGraph {
            nodes,
            edges,
            adjacency,
        };
        if !g.is_connected() {
            return Err(PatternError::Disconnected);
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, i: usize) -> &PatternNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[PatternNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[PatternEdge] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<&PatternEdge> {
        self.adjacency[a]
            .iter()
            .find(|(nb, _)| *nb == b)
            .map(|(_, ei)| &self.edges[*ei])
    }

    pub fn node_by_map(&self, map: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.map_label == Some(map))
    }

    fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &(u, _) in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.nodes.len()
    }

    /// A copy with map labels rewritten through `f` (used for canonical
    /// renumbering at the template level).
    pub fn with_maps_rewritten(&self, f: impl Fn(u32) -> Option<u32>) -> PatternGraph {
        let nodes = self
            .nodes
            .iter()
            .map(|n| PatternNode {
                map_label: n.map_label.and_then(&f),
                ..*n
            })
            .collect();
        PatternGraph::new(nodes, self.edges.clone()).expect("map rewrite preserves validity")
    }
}

/// An injective assignment of pattern nodes to molecule atoms;
/// `assignment[i]` is the atom matched by pattern node `i`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MatchMap {
    pub assignment: Vec<usize>,
}

/// Parse a pattern string (molecule grammar plus `*` and `~`).
pub fn parse_pattern(text: &str) -> Result<PatternGraph, ParseError> {
    let raw = notation::parse_raw(text, Mode::Pattern)?;
    let mut nodes = Vec::with_capacity(raw.atoms.len());
    let mut seen_maps = std::collections::HashSet::new();
    for ra in &raw.atoms {
        if let Some(m) = ra.map_label {
            if !seen_maps.insert(m) {
                return Err(ParseError {
                    offset: ra.offset,
                    kind: notation::ParseErrorKind::DuplicateMapLabel(m),
                });
            }
        }
        nodes.push(PatternNode {
            element: ra.element,
            aromatic: ra.aromatic,
            charge: ra.charge,
            hcount: ra.hcount,
            map_label: ra.map_label,
        });
    }
    let mut edges = Vec::with_capacity(raw.edges.len());
    for e in &raw.edges {
        let constraint = match e.kind {
            RawBondKind::Wildcard => BondConstraint::Any,
            RawBondKind::Order(o) => {
                if o == BondOrder::Aromatic
                    && (nodes[e.a].aromatic == Some(false) || nodes[e.b].aromatic == Some(false))
                {
                    return Err(ParseError {
                        offset: e.offset,
                        kind: notation::ParseErrorKind::AromaticBondEndpoints,
                    });
                }
                BondConstraint::Order(o)
            }
            RawBondKind::Unspecified => {
                if nodes[e.a].aromatic == Some(true) && nodes[e.b].aromatic == Some(true) {
                    BondConstraint::Order(BondOrder::Aromatic)
                } else {
                    BondConstraint::Order(BondOrder::Single)
                }
            }
        };
        edges.push(PatternEdge {
            a: e.a,
            b: e.b,
            constraint,
        });
    }
    PatternGraph::new(nodes, edges).map_err(|_| ParseError {
        offset: 0,
        kind: notation::ParseErrorKind::EmptyInput,
    })
}

/// All injective embeddings of `p` into `m`, sorted lexicographically by
/// assignment vector. Repeated calls return identical lists.
pub fn find_matches(p: &PatternGraph, m: &MolGraph) -> Vec<MatchMap> {
    let mut out = Vec::new();
    search(p, m, false, &mut out);
    out.sort();
    out
}

/// True iff at least one embedding exists; stops at the first.
pub fn contains(p: &PatternGraph, m: &MolGraph) -> bool {
    let mut out = Vec::new();
    search(p, m, true, &mut out);
    !out.is_empty()
}

/// Backtracking search. Pattern nodes are visited starting from the highest
/// degree node, then greedily by (connected-to-matched, degree descending),
/// so each step after the first extends along a pattern edge.
fn search(p: &PatternGraph, m: &MolGraph, first_only: bool, out: &mut Vec<MatchMap>) {
    let np = p.n_nodes();
    if np == 0 || np > m.n_atoms() {
        return;
    }
    let order = visit_order(p);
    let mut assignment = vec![usize::MAX; np];
    let mut used = vec![false; m.n_atoms()];
    extend(p, m, &order, 0, &mut assignment, &mut used, first_only, out);
}

fn visit_order(p: &PatternGraph) -> Vec<usize> {
    let np = p.n_nodes();
    let mut order = Vec::with_capacity(np);
    let mut placed = vec![false; np];
    let start = (0..np)
        .max_by_key(|&v| (p.degree(v), std::cmp::Reverse(v)))
        .expect("non-empty pattern");
    order.push(start);
    placed[start] = true;
    while order.len() < np {
        let next = (0..np)
            .filter(|&v| !placed[v])
            .filter(|&v| p.neighbors(v).iter().any(|&(u, _)| placed[u]))
            .max_by_key(|&v| (p.degree(v), std::cmp::Reverse(v)))
            .expect("pattern is connected");
        order.push(next);
        placed[next] = true;
    }
    order
}

#[allow(clippy::too_many_arguments)]
fn extend(
    p: &PatternGraph,
    m: &MolGraph,
    order: &[usize],
    depth: usize,
    assignment: &mut [usize],
    used: &mut [bool],
    first_only: bool,
    out: &mut Vec<MatchMap>,
) -> bool {
    if depth == order.len() {
        out.push(MatchMap {
            assignment: assignment.to_vec(),
        });
        return first_only;
    }
    let pv = order[depth];
    // Candidate atoms: neighbors of an already-matched pattern neighbor when
    // one exists, otherwise every atom.
    let anchor = p
        .neighbors(pv)
        .iter()
        .find(|&&(u, _)| assignment[u] != usize::MAX)
        .map(|&(u, _)| assignment[u]);
    let candidates: Vec<usize> = match anchor {
        Some(atom) => m.neighbors(atom).iter().map(|&(w, _)| w).collect(),
        None => (0..m.n_atoms()).collect(),
    };
    'cand: for w in candidates {
        if used[w] || !p.node(pv).matches(m.atom(w)) {
            continue;
        }
        for &(pu, ei) in p.neighbors(pv) {
            if assignment[pu] != usize::MAX {
                match m.bond_between(w, assignment[pu]) {
                    Some(bond) if p.edges()[ei].constraint.matches(bond.order) => {}
                    _ => continue 'cand,
                }
            }
        }
        assignment[pv] = w;
        used[w] = true;
        let stop = extend(p, m, order, depth + 1, assignment, used, first_only, out);
        assignment[pv] = usize::MAX;
        used[w] = false;
        if stop {
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Canonical form and writing
// ---------------------------------------------------------------------------

fn bond_class(c: BondConstraint) -> u8 {
    match c {
        BondConstraint::Any => 5,
        BondConstraint::Order(o) => o.code(),
    }
}

pub(crate) fn pattern_colored_graph(p: &PatternGraph, with_maps: bool) -> canon::ColoredGraph {
    let n = p.n_nodes();
    let mut colors = Vec::with_capacity(n);
    for v in 0..n {
        let node = p.node(v);
        let mut counts = [0u8; 5];
        for &(_, ei) in p.neighbors(v) {
            counts[bond_class(p.edges()[ei].constraint) as usize - 1] += 1;
        }
        let mut c = vec![
            node.element.map(|e| e.index() as u8).unwrap_or(0xFE),
            node.aromatic.map(|a| a as u8).unwrap_or(2),
            node.charge.map(|c| (c + 8) as u8).unwrap_or(0xFE),
            node.hcount.unwrap_or(0xFE),
            p.degree(v) as u8,
        ];
        c.extend_from_slice(&counts);
        if with_maps {
            let m = node.map_label.unwrap_or(0);
            c.extend_from_slice(&m.to_be_bytes());
        }
        colors.push(c);
    }
    let adj = (0..n)
        .map(|v| {
            p.neighbors(v)
                .iter()
                .map(|&(u, ei)| (u, bond_class(p.edges()[ei].constraint)))
                .collect()
        })
        .collect();
    canon::ColoredGraph { colors, adj }
}

struct PatView<'a> {
    p: &'a PatternGraph,
    with_maps: bool,
}

impl NotationView for PatView<'_> {
    fn n(&self) -> usize {
        self.p.n_nodes()
    }

    fn neighbors_of(&self, v: usize) -> Vec<usize> {
        self.p.neighbors(v).iter().map(|&(u, _)| u).collect()
    }

    fn atom_token(&self, v: usize) -> String {
        let node = self.p.node(v);
        let map = if self.with_maps { node.map_label } else { None };
        let fully_wild = node.element.is_none()
            && node.aromatic.is_none()
            && node.charge.is_none()
            && node.hcount.is_none();
        if fully_wild && map.is_none() {
            return "*".to_string();
        }
        let symbol = match node.element {
            None => "*".to_string(),
            Some(e) => {
                if node.aromatic == Some(true) {
                    e.symbol().to_ascii_lowercase()
                } else {
                    e.symbol().to_string()
                }
            }
        };
        let bare_ok = node
            .element
            .map(|e| {
                matches!(
                    e,
                    Element::B
                        | Element::C
                        | Element::N
                        | Element::O
                        | Element::P
                        | Element::S
                        | Element::F
                        | Element::Cl
                        | Element::Br
                        | Element::I
                )
            })
            .unwrap_or(false)
            && node.aromatic.is_some()
            && (node.aromatic == Some(false) || node.element.map_or(false, |e| e.can_be_aromatic()))
            && node.charge == Some(0)
            && node.hcount.is_none()
            && map.is_none();
        if bare_ok {
            return symbol;
        }
        let mut tok = String::from("[");
        tok.push_str(&symbol);
        match node.hcount {
            None => {}
            Some(0) => tok.push_str("H0"),
            Some(1) => tok.push('H'),
            Some(h) => {
                tok.push('H');
                tok.push_str(&h.to_string());
            }
        }
        if let Some(c) = node.charge {
            tok.push_str(&notation::charge_suffix(c));
        }
        if let Some(m) = map {
            tok.push(':');
            tok.push_str(&m.to_string());
        }
        tok.push(']');
        tok
    }

    fn bond_token(&self, a: usize, b: usize) -> &'static str {
        let edge = self.p.edge_between(a, b).expect("adjacent nodes");
        match edge.constraint {
            BondConstraint::Any => "~",
            BondConstraint::Order(o) => {
                let both_aromatic = self.p.node(a).aromatic == Some(true)
                    && self.p.node(b).aromatic == Some(true);
                notation::bond_symbol(o, both_aromatic)
            }
        }
    }
}

/// Canonical text of a pattern with map labels stripped: the identity of a
/// reaction-center pattern.
pub fn pattern_key(p: &PatternGraph) -> String {
    let g = pattern_colored_graph(p, false);
    let (rank, _) = canon::canonical_form(&g);
    notation::write_with_ranks(&PatView { p, with_maps: false }, &rank)
}

/// Write a pattern following a caller-chosen ranking, map labels included.
pub(crate) fn write_pattern_with_ranks(p: &PatternGraph, rank: &[usize]) -> String {
    notation::write_with_ranks(&PatView { p, with_maps: true }, rank)
}

/// Canonical text of a pattern with map labels kept (maps take part in the
/// canonical invariant).
pub fn write_pattern_mapped(p: &PatternGraph) -> String {
    let g = pattern_colored_graph(p, true);
    let (rank, _) = canon::canonical_form(&g);
    write_pattern_with_ranks(p, &rank)
}

/// All canonical labelings of a pattern ignoring maps (ties arise from
/// automorphisms; template keying resolves them against the full rule).
pub(crate) fn minimal_labelings_ignoring_maps(p: &PatternGraph) -> Vec<Vec<usize>> {
    canon::all_minimal_labelings(&pattern_colored_graph(p, false))
}
