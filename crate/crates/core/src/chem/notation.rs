//! Line-notation grammar: parsing for molecules and patterns, plus the
//! canonical writer. The grammar is the SMILES-like subset documented in
//! `docs/notation.md`: organic-subset atoms, bracket atoms with H count,
//! charge and map label, bond symbols `- = # :`, ring-closure digits
//! (`%nn` beyond 9) and parenthesized branches. Patterns additionally
//! allow `*` (wildcard atom) and `~` (wildcard bond). Stereo markers,
//! isotopes and dots are rejected with positioned errors.

use super::canon;
use super::{Atom, Bond, BondOrder, Element, MolGraph, MAX_CHARGE};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Molecule,
    Pattern,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected character '{0}'")]
    UnexpectedChar(char),
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("empty input")]
    EmptyInput,
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(&'static str),
    #[error("ring-closure {0} opened here but never closed")]
    UnmatchedRingClosure(u16),
    #[error("ring-closure bond symbols disagree")]
    RingBondMismatch,
    #[error("ring closure bonds an atom to itself")]
    RingSelfBond,
    #[error("duplicate bond between the same atom pair")]
    DuplicateBond,
    #[error("branch opened here but never closed")]
    UnmatchedOpenParen,
    #[error("branch close without a matching open")]
    UnmatchedCloseParen,
    #[error("empty branch")]
    EmptyBranch,
    #[error("bond symbol with no preceding atom")]
    BondWithoutAtom,
    #[error("bond symbol with nothing bonded after it")]
    TrailingBond,
    #[error("branch with no preceding atom")]
    BranchWithoutAtom,
    #[error("formal charge outside [-4,4]")]
    ChargeOutOfRange,
    #[error("map label must be positive")]
    MapLabelZero,
    #[error("map label too large")]
    MapLabelTooLarge,
    #[error("hydrogen count too large")]
    HCountTooLarge,
    #[error("expected ']' to close bracket atom")]
    MissingBracketClose,
    #[error("bracket atom has no symbol")]
    EmptyBracket,
    #[error("map label {0} used twice in one molecule")]
    DuplicateMapLabel(u32),
    #[error("aromatic bond requires aromatic atoms on both ends")]
    AromaticBondEndpoints,
    #[error("'.' separates molecules at the reaction level, not inside one graph")]
    DotDisallowed,
}

/// Parse failure with a 0-based byte offset into the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at byte {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    fn new(offset: usize, kind: ParseErrorKind) -> ParseError {
        ParseError { offset, kind }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RawAtom {
    pub element: Option<Element>,
    pub aromatic: Option<bool>,
    pub charge: Option<i8>,
    pub hcount: Option<u8>,
    pub map_label: Option<u32>,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RawBondKind {
    Unspecified,
    Wildcard,
    Order(BondOrder),
}

#[derive(Debug, Clone)]
pub(crate) struct RawEdge {
    pub a: usize,
    pub b: usize,
    pub kind: RawBondKind,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct RawGraph {
    pub atoms: Vec<RawAtom>,
    pub edges: Vec<RawEdge>,
}

/// Parse a single molecule. Every input either yields a graph or a
/// positioned error; the function never panics on malformed text.
pub fn parse_molecule(text: &str) -> Result<MolGraph, ParseError> {
    let raw = parse_raw(text, Mode::Molecule)?;
    mol_from_raw(&raw)
}

pub(crate) fn parse_raw(text: &str, mode: Mode) -> Result<RawGraph, ParseError> {
    Parser::new(text.as_bytes(), mode).run()
}

fn mol_from_raw(raw: &RawGraph) -> Result<MolGraph, ParseError> {
    let mut atoms = Vec::with_capacity(raw.atoms.len());
    let mut seen_maps = std::collections::HashSet::new();
    for ra in &raw.atoms {
        if let Some(m) = ra.map_label {
            if !seen_maps.insert(m) {
                return Err(ParseError::new(ra.offset, ParseErrorKind::DuplicateMapLabel(m)));
            }
        }
        atoms.push(Atom {
            element: ra.element.expect("molecule mode rejects wildcard atoms"),
            formal_charge: ra.charge.unwrap_or(0),
            aromatic: ra.aromatic.unwrap_or(false),
            explicit_h: ra.hcount.unwrap_or(0),
            map_label: ra.map_label,
        });
    }
    let mut bonds = Vec::with_capacity(raw.edges.len());
    for e in &raw.edges {
        let order = match e.kind {
            RawBondKind::Order(o) => o,
            RawBondKind::Unspecified => {
                if atoms[e.a].aromatic && atoms[e.b].aromatic {
                    BondOrder::Aromatic
                } else {
                    BondOrder::Single
                }
            }
            RawBondKind::Wildcard => unreachable!("molecule mode rejects wildcard bonds"),
        };
        if order == BondOrder::Aromatic && !(atoms[e.a].aromatic && atoms[e.b].aromatic) {
            return Err(ParseError::new(e.offset, ParseErrorKind::AromaticBondEndpoints));
        }
        bonds.push(Bond {
            a: e.a,
            b: e.b,
            order,
        });
    }
    Ok(MolGraph::new(atoms, bonds).expect("parser-validated graph"))
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    mode: Mode,
    atoms: Vec<RawAtom>,
    edges: Vec<RawEdge>,
    edge_pairs: std::collections::HashSet<(usize, usize)>,
    prev: Option<usize>,
    branch_stack: Vec<(usize, usize, usize)>, // (attach atom, open offset, atom count at open)
    pending_bond: Option<(RawBondKind, usize)>,
    ring_open: std::collections::HashMap<u16, (usize, Option<RawBondKind>, usize)>,
}

impl<'a> Parser<'a> {
    fn new(bytes: &'a [u8], mode: Mode) -> Parser<'a> {
        Parser {
            bytes,
            pos: 0,
            mode,
            atoms: Vec::new(),
            edges: Vec::new(),
            edge_pairs: std::collections::HashSet::new(),
            prev: None,
            branch_stack: Vec::new(),
            pending_bond: None,
            ring_open: std::collections::HashMap::new(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn err<T>(&self, offset: usize, kind: ParseErrorKind) -> Result<T, ParseError> {
        Err(ParseError::new(offset, kind))
    }

    fn run(mut self) -> Result<RawGraph, ParseError> {
        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'[' => {
                    let atom = self.parse_bracket_atom()?;
                    self.place_atom(atom)?;
                }
                b'A'..=b'Z' | b'a'..=b'z' => {
                    let atom = self.parse_organic_atom()?;
                    self.place_atom(atom)?;
                }
                b'*' => {
                    if self.mode == Mode::Molecule {
                        return self.err(
                            at,
                            ParseErrorKind::UnsupportedFeature("wildcard atom is pattern-only"),
                        );
                    }
                    self.pos += 1;
                    self.place_atom(RawAtom {
                        element: None,
                        aromatic: None,
                        charge: None,
                        hcount: None,
                        map_label: None,
                        offset: at,
                    })?;
                }
                b'-' => self.set_pending(RawBondKind::Order(BondOrder::Single), at)?,
                b'=' => self.set_pending(RawBondKind::Order(BondOrder::Double), at)?,
                b'#' => self.set_pending(RawBondKind::Order(BondOrder::Triple), at)?,
                b':' => self.set_pending(RawBondKind::Order(BondOrder::Aromatic), at)?,
                b'~' => {
                    if self.mode == Mode::Molecule {
                        return self.err(
                            at,
                            ParseErrorKind::UnsupportedFeature("wildcard bond is pattern-only"),
                        );
                    }
                    self.set_pending(RawBondKind::Wildcard, at)?;
                }
                b'0'..=b'9' => {
                    let d = (c - b'0') as u16;
                    self.pos += 1;
                    self.ring_closure(d, at)?;
                }
                b'%' => {
                    self.pos += 1;
                    let d1 = self.expect_digit()?;
                    let d2 = self.expect_digit()?;
                    let id = (d1 - b'0') as u16 * 10 + (d2 - b'0') as u16;
                    self.ring_closure(id, at)?;
                }
                b'(' => {
                    let attach = match self.prev {
                        Some(p) => p,
                        None => return self.err(at, ParseErrorKind::BranchWithoutAtom),
                    };
                    if self.pending_bond.is_some() {
                        return self.err(at, ParseErrorKind::UnexpectedChar('('));
                    }
                    self.branch_stack.push((attach, at, self.atoms.len()));
                    self.pos += 1;
                }
                b')' => {
                    if let Some((_, bond_at)) = self.pending_bond {
                        return self.err(bond_at, ParseErrorKind::TrailingBond);
                    }
                    match self.branch_stack.pop() {
                        Some((attach, _, count_at_open)) => {
                            if self.atoms.len() == count_at_open {
                                return self.err(at, ParseErrorKind::EmptyBranch);
                            }
                            self.prev = Some(attach);
                        }
                        None => return self.err(at, ParseErrorKind::UnmatchedCloseParen),
                    }
                    self.pos += 1;
                }
                b'/' | b'\\' => {
                    return self.err(at, ParseErrorKind::UnsupportedFeature("stereo bond marker"))
                }
                b'@' => {
                    return self.err(at, ParseErrorKind::UnsupportedFeature("chirality marker"))
                }
                b'.' => return self.err(at, ParseErrorKind::DotDisallowed),
                other => return self.err(at, ParseErrorKind::UnexpectedChar(other as char)),
            }
        }
        if let Some((_, bond_at)) = self.pending_bond {
            return self.err(bond_at, ParseErrorKind::TrailingBond);
        }
        if let Some(&(_, open_at, _)) = self.branch_stack.first() {
            return self.err(open_at, ParseErrorKind::UnmatchedOpenParen);
        }
        if !self.ring_open.is_empty() {
            let (&id, &(_, _, open_at)) = self
                .ring_open
                .iter()
                .min_by_key(|(_, &(_, _, off))| off)
                .expect("non-empty");
            return self.err(open_at, ParseErrorKind::UnmatchedRingClosure(id));
        }
        if self.atoms.is_empty() {
            return self.err(0, ParseErrorKind::EmptyInput);
        }
        Ok(RawGraph {
            atoms: self.atoms,
            edges: self.edges,
        })
    }

    fn expect_digit(&mut self) -> Result<u8, ParseError> {
        match self.peek() {
            Some(d @ b'0'..=b'9') => {
                self.pos += 1;
                Ok(d)
            }
            Some(other) => self.err(self.pos, ParseErrorKind::UnexpectedChar(other as char)),
            None => self.err(self.bytes.len(), ParseErrorKind::UnexpectedEnd),
        }
    }

    fn set_pending(&mut self, kind: RawBondKind, at: usize) -> Result<(), ParseError> {
        if self.prev.is_none() {
            return self.err(at, ParseErrorKind::BondWithoutAtom);
        }
        if self.pending_bond.is_some() {
            return self.err(at, ParseErrorKind::UnexpectedChar(self.bytes[at] as char));
        }
        self.pending_bond = Some((kind, at));
        self.pos += 1;
        Ok(())
    }

    fn add_edge(&mut self, a: usize, b: usize, kind: RawBondKind, at: usize) -> Result<(), ParseError> {
        let key = (a.min(b), a.max(b));
        if !self.edge_pairs.insert(key) {
            return self.err(at, ParseErrorKind::DuplicateBond);
        }
        self.edges.push(RawEdge {
            a,
            b,
            kind,
            offset: at,
        });
        Ok(())
    }

    fn place_atom(&mut self, atom: RawAtom) -> Result<(), ParseError> {
        let at = atom.offset;
        let idx = self.atoms.len();
        self.atoms.push(atom);
        if let Some(p) = self.prev {
            let kind = match self.pending_bond.take() {
                Some((k, _)) => k,
                None => RawBondKind::Unspecified,
            };
            self.add_edge(p, idx, kind, at)?;
        } else if let Some((_, bond_at)) = self.pending_bond {
            return self.err(bond_at, ParseErrorKind::BondWithoutAtom);
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_closure(&mut self, id: u16, at: usize) -> Result<(), ParseError> {
        let cur = match self.prev {
            Some(p) => p,
            None => return self.err(at, ParseErrorKind::BondWithoutAtom),
        };
        let pending = self.pending_bond.take().map(|(k, _)| k);
        if let Some((other, other_bond, _)) = self.ring_open.remove(&id) {
            if other == cur {
                return self.err(at, ParseErrorKind::RingSelfBond);
            }
            let kind = match (other_bond, pending) {
                (None, None) => RawBondKind::Unspecified,
                (Some(k), None) | (None, Some(k)) => k,
                (Some(k1), Some(k2)) => {
                    if k1 == k2 {
                        k1
                    } else {
                        return self.err(at, ParseErrorKind::RingBondMismatch);
                    }
                }
            };
            self.add_edge(other, cur, kind, at)?;
        } else {
            self.ring_open.insert(id, (cur, pending, at));
        }
        Ok(())
    }

    fn parse_organic_atom(&mut self) -> Result<RawAtom, ParseError> {
        let at = self.pos;
        let c = self.bytes[self.pos];
        // Two-letter organic-subset symbols first.
        if c == b'C' && self.bytes.get(self.pos + 1) == Some(&b'l') {
            self.pos += 2;
            return Ok(self.plain_atom(Element::Cl, false, at));
        }
        if c == b'B' && self.bytes.get(self.pos + 1) == Some(&b'r') {
            self.pos += 2;
            return Ok(self.plain_atom(Element::Br, false, at));
        }
        let (element, aromatic) = match c {
            b'B' => (Element::B, false),
            b'C' => (Element::C, false),
            b'N' => (Element::N, false),
            b'O' => (Element::O, false),
            b'P' => (Element::P, false),
            b'S' => (Element::S, false),
            b'F' => (Element::F, false),
            b'I' => (Element::I, false),
            b'b' => (Element::B, true),
            b'c' => (Element::C, true),
            b'n' => (Element::N, true),
            b'o' => (Element::O, true),
            b'p' => (Element::P, true),
            b's' => (Element::S, true),
            other => return self.err(at, ParseErrorKind::UnexpectedChar(other as char)),
        };
        self.pos += 1;
        Ok(self.plain_atom(element, aromatic, at))
    }

    fn plain_atom(&self, element: Element, aromatic: bool, offset: usize) -> RawAtom {
        RawAtom {
            element: Some(element),
            aromatic: Some(aromatic),
            charge: Some(0),
            hcount: None,
            map_label: None,
            offset,
        }
    }

    fn parse_bracket_atom(&mut self) -> Result<RawAtom, ParseError> {
        let open_at = self.pos;
        self.pos += 1; // consume '['
        let sym_at = self.pos;
        let (element, aromatic) = match self.peek() {
            None => return self.err(self.bytes.len(), ParseErrorKind::UnexpectedEnd),
            Some(b']') => return self.err(sym_at, ParseErrorKind::EmptyBracket),
            Some(b'0'..=b'9') => {
                return self.err(sym_at, ParseErrorKind::UnsupportedFeature("isotope label"))
            }
            Some(b'*') => {
                if self.mode == Mode::Molecule {
                    return self.err(
                        sym_at,
                        ParseErrorKind::UnsupportedFeature("wildcard atom is pattern-only"),
                    );
                }
                self.pos += 1;
                (None, None)
            }
            Some(b'@') => {
                return self.err(sym_at, ParseErrorKind::UnsupportedFeature("chirality marker"))
            }
            Some(c @ b'A'..=b'Z') => {
                self.pos += 1;
                let mut sym = String::new();
                sym.push(c as char);
                // Greedy second lowercase letter, except 'H' which starts the
                // hydrogen count and never extends a one-letter symbol here.
                if let Some(l @ b'a'..=b'z') = self.peek() {
                    sym.push(l as char);
                    self.pos += 1;
                }
                (Some(Element::from_symbol(&sym)), Some(false))
            }
            Some(c @ b'a'..=b'z') => {
                self.pos += 1;
                // Greedy second lowercase letter: two-letter aromatic symbols
                // ("se", "xx", ...) all fall into Other.
                let two = if let Some(l @ b'a'..=b'z') = self.peek() {
                    self.pos += 1;
                    Some(l)
                } else {
                    None
                };
                let element = match (c, two) {
                    (b'b', None) => Element::B,
                    (b'c', None) => Element::C,
                    (b'n', None) => Element::N,
                    (b'o', None) => Element::O,
                    (b'p', None) => Element::P,
                    (b's', None) => Element::S,
                    _ => Element::Other,
                };
                (Some(element), Some(true))
            }
            Some(other) => return self.err(sym_at, ParseErrorKind::UnexpectedChar(other as char)),
        };
        if self.peek() == Some(b'@') {
            return self.err(self.pos, ParseErrorKind::UnsupportedFeature("chirality marker"));
        }
        // Optional hydrogen count.
        let mut hcount: Option<u8> = None;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            let mut digits = String::new();
            while let Some(d @ b'0'..=b'9') = self.peek() {
                digits.push(d as char);
                self.pos += 1;
                if digits.len() > 2 {
                    return self.err(self.pos - 1, ParseErrorKind::HCountTooLarge);
                }
            }
            let count = if digits.is_empty() {
                1
            } else {
                digits.parse::<u8>().map_err(|_| {
                    ParseError::new(self.pos, ParseErrorKind::HCountTooLarge)
                })?
            };
            hcount = Some(count);
        }
        // Optional charge.
        let mut charge: Option<i8> = None;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let charge_at = self.pos;
            self.pos += 1;
            let unit: i32 = if sign == b'+' { 1 } else { -1 };
            let mut value: i32;
            if let Some(d @ b'0'..=b'9') = self.peek() {
                self.pos += 1;
                value = unit * (d - b'0') as i32;
                if let Some(b'0'..=b'9') = self.peek() {
                    return self.err(charge_at, ParseErrorKind::ChargeOutOfRange);
                }
            } else {
                value = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    value += unit;
                }
            }
            if value.abs() > MAX_CHARGE as i32 {
                return self.err(charge_at, ParseErrorKind::ChargeOutOfRange);
            }
            charge = Some(value as i8);
        }
        // Optional map label.
        let mut map_label: Option<u32> = None;
        if self.peek() == Some(b':') {
            self.pos += 1;
            let map_at = self.pos;
            let mut digits = String::new();
            while let Some(d @ b'0'..=b'9') = self.peek() {
                digits.push(d as char);
                self.pos += 1;
            }
            if digits.is_empty() {
                return self.err(map_at, ParseErrorKind::UnexpectedChar(
                    self.peek().map(|b| b as char).unwrap_or('\0'),
                ));
            }
            if digits.len() > 7 {
                return self.err(map_at, ParseErrorKind::MapLabelTooLarge);
            }
            let value: u32 = digits.parse().expect("bounded digits");
            if value == 0 {
                return self.err(map_at, ParseErrorKind::MapLabelZero);
            }
            map_label = Some(value);
        }
        if self.peek() != Some(b']') {
            return self.err(self.pos.min(self.bytes.len()), ParseErrorKind::MissingBracketClose);
        }
        self.pos += 1;
        // Wildcard atoms keep charge truly optional; element atoms default to 0
        // so that written and reparsed constraints coincide.
        let charge = if element.is_some() {
            Some(charge.unwrap_or(0))
        } else {
            charge
        };
        Ok(RawAtom {
            element,
            aromatic,
            charge,
            hcount,
            map_label,
            offset: open_at,
        })
    }
}

// ---------------------------------------------------------------------------
// Canonical writer
// ---------------------------------------------------------------------------

/// View adapter the canonical writer traverses. Implementations exist for
/// molecules (maps stripped) and patterns (maps kept).
pub(crate) trait NotationView {
    fn n(&self) -> usize;
    /// Neighbor atom indices (unsorted; writer sorts by canonical rank).
    fn neighbors_of(&self, v: usize) -> Vec<usize>;
    fn atom_token(&self, v: usize) -> String;
    fn bond_token(&self, a: usize, b: usize) -> &'static str;
}

/// Serialize a connected graph following the canonical ranking
/// (`rank[v]` = position). Ring-closure numbers are assigned in emission
/// order and never reused, `%nn` past 9.
pub(crate) fn write_with_ranks(view: &dyn NotationView, rank: &[usize]) -> String {
    let n = view.n();
    assert!(n > 0, "cannot write an empty graph");
    let mut order = vec![0usize; n];
    for (v, &r) in rank.iter().enumerate() {
        order[r] = v;
    }
    let root = order[0];

    // Pre-pass: spanning tree plus ring bonds, neighbors in rank order.
    let mut visited = vec![false; n];
    let mut visit_seq = vec![usize::MAX; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut ring_pairs: Vec<(usize, usize)> = Vec::new();
    let mut seen_edges = std::collections::HashSet::new();
    let mut counter = 0usize;
    // Iterative DFS that mirrors the recursive emission order.
    let mut stack: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    visited[root] = true;
    visit_seq[root] = counter;
    counter += 1;
    let mut nbrs = view.neighbors_of(root);
    nbrs.sort_by_key(|&u| rank[u]);
    stack.push((root, usize::MAX, nbrs));
    while let Some((v, parent, nbrs)) = stack.last_mut() {
        let (v, parent) = (*v, *parent);
        if nbrs.is_empty() {
            stack.pop();
            continue;
        }
        let u = nbrs.remove(0);
        if u == parent {
            continue;
        }
        let ekey = (v.min(u), v.max(u));
        if visited[u] {
            if seen_edges.insert(ekey) {
                let (first, second) = if visit_seq[v] < visit_seq[u] { (v, u) } else { (u, v) };
                ring_pairs.push((first, second));
            }
            continue;
        }
        seen_edges.insert(ekey);
        visited[u] = true;
        visit_seq[u] = counter;
        counter += 1;
        children[v].push(u);
        let mut unbrs = view.neighbors_of(u);
        unbrs.sort_by_key(|&x| rank[x]);
        stack.push((u, v, unbrs));
    }
    assert!(
        visited.iter().all(|&b| b),
        "canonical writer requires a connected graph"
    );

    // Number ring bonds deterministically by visit order.
    ring_pairs.sort_by_key(|&(a, b)| (visit_seq[a], visit_seq[b]));
    let mut ring_at: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (digit, other end)
    for (i, &(a, b)) in ring_pairs.iter().enumerate() {
        let digit = i + 1;
        assert!(digit <= 99, "too many ring closures to encode");
        ring_at[a].push((digit, b));
        ring_at[b].push((digit, a));
    }
    for list in &mut ring_at {
        list.sort_unstable();
    }

    let mut out = String::new();
    emit(view, root, &children, &ring_at, &mut out);
    out
}

fn emit(
    view: &dyn NotationView,
    v: usize,
    children: &[Vec<usize>],
    ring_at: &[Vec<(usize, usize)>],
    out: &mut String,
) {
    out.push_str(&view.atom_token(v));
    for &(digit, other) in &ring_at[v] {
        out.push_str(view.bond_token(v, other));
        if digit <= 9 {
            out.push((b'0' + digit as u8) as char);
        } else {
            out.push('%');
            out.push((b'0' + (digit / 10) as u8) as char);
            out.push((b'0' + (digit % 10) as u8) as char);
        }
    }
    let kids = &children[v];
    for (i, &u) in kids.iter().enumerate() {
        let last = i + 1 == kids.len();
        if !last {
            out.push('(');
        }
        out.push_str(view.bond_token(v, u));
        emit(view, u, children, ring_at, out);
        if !last {
            out.push(')');
        }
    }
}

struct MolView<'a> {
    mol: &'a MolGraph,
}

impl NotationView for MolView<'_> {
    fn n(&self) -> usize {
        self.mol.n_atoms()
    }

    fn neighbors_of(&self, v: usize) -> Vec<usize> {
        self.mol.neighbors(v).iter().map(|&(u, _)| u).collect()
    }

    fn atom_token(&self, v: usize) -> String {
        let a = self.mol.atom(v);
        let bare_ok = a.element.organic_subset()
            && a.formal_charge == 0
            && a.explicit_h == 0
            && (!a.aromatic || a.element.can_be_aromatic());
        let symbol = if a.aromatic {
            a.element.symbol().to_ascii_lowercase()
        } else {
            a.element.symbol().to_string()
        };
        if bare_ok {
            return symbol;
        }
        let mut tok = String::from("[");
        tok.push_str(&symbol);
        match a.explicit_h {
            0 => {}
            1 => tok.push('H'),
            h => {
                tok.push('H');
                tok.push_str(&h.to_string());
            }
        }
        tok.push_str(&charge_suffix(a.formal_charge));
        tok.push(']');
        tok
    }

    fn bond_token(&self, a: usize, b: usize) -> &'static str {
        let bond = self.mol.bond_between(a, b).expect("adjacent atoms");
        let both_aromatic = self.mol.atom(a).aromatic && self.mol.atom(b).aromatic;
        bond_symbol(bond.order, both_aromatic)
    }
}

pub(crate) fn charge_suffix(charge: i8) -> String {
    match charge {
        0 => String::new(),
        1 => "+".to_string(),
        -1 => "-".to_string(),
        c if c > 0 => format!("+{c}"),
        c => format!("-{}", -c),
    }
}

pub(crate) fn bond_symbol(order: BondOrder, both_aromatic: bool) -> &'static str {
    match order {
        BondOrder::Single => {
            if both_aromatic {
                "-"
            } else {
                ""
            }
        }
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic => {
            if both_aromatic {
                ""
            } else {
                ":"
            }
        }
    }
}

pub(crate) fn mol_colored_graph(mol: &MolGraph) -> canon::ColoredGraph {
    let n = mol.n_atoms();
    let mut colors = Vec::with_capacity(n);
    for v in 0..n {
        let a = mol.atom(v);
        let mut counts = [0u8; 4];
        for &(_, bi) in mol.neighbors(v) {
            counts[mol.bond(bi).order.code() as usize - 1] += 1;
        }
        colors.push(vec![
            a.element.index() as u8,
            (a.formal_charge + 8) as u8,
            a.aromatic as u8,
            a.explicit_h,
            mol.degree(v) as u8,
            counts[0],
            counts[1],
            counts[2],
            counts[3],
        ]);
    }
    let adj = (0..n)
        .map(|v| {
            mol.neighbors(v)
                .iter()
                .map(|&(u, bi)| (u, mol.bond(bi).order.code()))
                .collect()
        })
        .collect();
    canon::ColoredGraph { colors, adj }
}

pub(crate) fn write_molecule_canonical(mol: &MolGraph) -> String {
    let g = mol_colored_graph(mol);
    let (rank, _) = canon::canonical_form(&g);
    write_with_ranks(&MolView { mol }, &rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::parse_molecule;

    #[test]
    fn parses_simple_chain() {
        let m = parse_molecule("CCO").unwrap();
        assert_eq!(m.n_atoms(), 3);
        assert_eq!(m.n_bonds(), 2);
        assert_eq!(m.atom(0).element, Element::C);
        assert_eq!(m.atom(2).element, Element::O);
        assert!(m.bonds().iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn parses_benzene_ring() {
        let m = parse_molecule("c1ccccc1").unwrap();
        assert_eq!(m.n_atoms(), 6);
        assert_eq!(m.n_bonds(), 6);
        assert!(m.atoms().iter().all(|a| a.aromatic && a.element == Element::C));
        assert!(m.bonds().iter().all(|b| b.order == BondOrder::Aromatic));
    }

    #[test]
    fn parses_bracket_atoms_with_maps() {
        let m = parse_molecule("[CH3:1][OH:2]").unwrap();
        assert_eq!(m.n_atoms(), 2);
        assert_eq!(m.atom(0).map_label, Some(1));
        assert_eq!(m.atom(0).explicit_h, 3);
        assert_eq!(m.atom(1).map_label, Some(2));
        assert_eq!(m.atom(1).explicit_h, 1);
    }

    #[test]
    fn unmatched_ring_closure_is_positioned() {
        let err = parse_molecule("C1CC").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnmatchedRingClosure(1));
        assert_eq!(err.offset, 1);
    }

    #[test]
    fn rejects_stereo_markers() {
        let err = parse_molecule("C/C=C/C").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::UnsupportedFeature(_)));
        assert_eq!(err.offset, 1);
        let err = parse_molecule("[C@H](C)O").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::UnsupportedFeature(_)));
    }

    #[test]
    fn rejects_wildcards_in_molecules() {
        assert!(matches!(
            parse_molecule("*C").unwrap_err().kind,
            ParseErrorKind::UnsupportedFeature(_)
        ));
        assert!(matches!(
            parse_molecule("C~C").unwrap_err().kind,
            ParseErrorKind::UnsupportedFeature(_)
        ));
    }

    #[test]
    fn rejects_dots() {
        let err = parse_molecule("CC.O").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::DotDisallowed);
        assert_eq!(err.offset, 2);
    }

    #[test]
    fn unknown_bracket_symbol_parses_to_other() {
        let m = parse_molecule("[Zn](C)C").unwrap();
        assert_eq!(m.atom(0).element, Element::Other);
    }

    #[test]
    fn charges_parse_and_validate() {
        let m = parse_molecule("[N+](C)(C)(C)C").unwrap();
        assert_eq!(m.atom(0).formal_charge, 1);
        let m = parse_molecule("[O-2]").unwrap();
        assert_eq!(m.atom(0).formal_charge, -2);
        let m = parse_molecule("[O--]").unwrap();
        assert_eq!(m.atom(0).formal_charge, -2);
        assert_eq!(
            parse_molecule("[O-5]").unwrap_err().kind,
            ParseErrorKind::ChargeOutOfRange
        );
    }

    #[test]
    fn ring_bond_order_agreement() {
        let m = parse_molecule("C=1CCCCC=1").unwrap();
        assert_eq!(m.bond_between(0, 5).unwrap().order, BondOrder::Double);
        assert_eq!(
            parse_molecule("C=1CCCCC-1").unwrap_err().kind,
            ParseErrorKind::RingBondMismatch
        );
    }

    #[test]
    fn branch_errors() {
        assert_eq!(
            parse_molecule("C(C").unwrap_err().kind,
            ParseErrorKind::UnmatchedOpenParen
        );
        assert_eq!(
            parse_molecule("CC)C").unwrap_err().kind,
            ParseErrorKind::UnmatchedCloseParen
        );
        assert_eq!(
            parse_molecule("(CC)").unwrap_err().kind,
            ParseErrorKind::BranchWithoutAtom
        );
        assert_eq!(
            parse_molecule("C()C").unwrap_err().kind,
            ParseErrorKind::EmptyBranch
        );
    }

    #[test]
    fn aromatic_bond_between_aliphatic_atoms_rejected() {
        assert_eq!(
            parse_molecule("C:C").unwrap_err().kind,
            ParseErrorKind::AromaticBondEndpoints
        );
    }

    #[test]
    fn writes_canonically_across_atom_orders() {
        let a = parse_molecule("OCC").unwrap();
        let b = parse_molecule("CCO").unwrap();
        assert_eq!(write_molecule_canonical(&a), write_molecule_canonical(&b));
        assert_eq!(write_molecule_canonical(&parse_molecule("C").unwrap()), "C");
    }

    #[test]
    fn written_form_reparses() {
        for src in [
            "CC(=O)OC",
            "c1ccccc1-c1ccccc1",
            "C1CC1C1CC1",
            "[NH4+]",
            "[O-]C(=O)C",
            "N#Cc1ccc(O)cc1",
            "[Si](C)(C)C",
            "[Zn]",
            "[se]",
        ] {
            let m = parse_molecule(src).unwrap();
            let written = write_molecule_canonical(&m);
            let re = parse_molecule(&written)
                .unwrap_or_else(|e| panic!("rewrite of {src} -> {written}: {e}"));
            assert_eq!(
                write_molecule_canonical(&re),
                written,
                "idempotent canonical write for {src}"
            );
        }
    }
}
