//! Molecular graph data model: atoms, bonds, line-notation parsing and
//! writing, canonical keys, and an exhaustive isomorphism oracle.
//!
//! Molecules are labeled undirected graphs. Aromaticity is taken verbatim
//! from the input notation and never re-perceived; implicit hydrogens are
//! never inferred, only `explicit_h` counts written in brackets are kept.
//! All types are immutable after construction and safe to share across
//! threads.

pub mod canon;
pub mod iso;
pub mod notation;

use thiserror::Error;

pub use iso::{graph_isomorphic, graph_isomorphic_with_limit, OracleError};
pub use notation::{parse_molecule, ParseError, ParseErrorKind};

/// Element vocabulary. Symbols outside the table parse to `Other` so that
/// unknown atoms stay distinguishable from carbon.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum Element {
    C,
    N,
    O,
    S,
    P,
    F,
    Cl,
    Br,
    I,
    B,
    Si,
    Other,
}

impl Element {
    pub const ALL: [Element; 12] = [
        Element::C,
        Element::N,
        Element::O,
        Element::S,
        Element::P,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
        Element::B,
        Element::Si,
        Element::Other,
    ];

    pub fn from_symbol(sym: &str) -> Element {
        match sym {
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "S" => Element::S,
            "P" => Element::P,
            "F" => Element::F,
            "Cl" => Element::Cl,
            "Br" => Element::Br,
            "I" => Element::I,
            "B" => Element::B,
            "Si" => Element::Si,
            _ => Element::Other,
        }
    }

    pub fn symbol(&self) -> &'static str {
        match self {
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::S => "S",
            Element::P => "P",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::B => "B",
            Element::Si => "Si",
            Element::Other => "Xx",
        }
    }

    pub fn index(&self) -> usize {
        Element::ALL.iter().position(|e| e == self).unwrap()
    }

    /// Elements that may carry the aromatic flag (writable as lowercase).
    pub fn can_be_aromatic(&self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S | Element::Other
        )
    }

    /// Organic-subset elements writable without brackets.
    fn organic_subset(&self) -> bool {
        matches!(
            self,
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
    }
}

pub const MIN_CHARGE: i8 = -4;
pub const MAX_CHARGE: i8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
    pub aromatic: bool,
    pub explicit_h: u8,
    pub map_label: Option<u32>,
}

impl Atom {
    pub fn new(element: Element) -> Atom {
        Atom {
            element,
            formal_charge: 0,
            aromatic: false,
            explicit_h: 0,
            map_label: None,
        }
    }

    /// Attribute tuple respected by isomorphism and canonical keys
    /// (map labels are deliberately absent).
    pub fn iso_label(&self) -> (Element, i8, bool, u8) {
        (self.element, self.formal_charge, self.aromatic, self.explicit_h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn code(&self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("bond endpoint {0} out of range for {1} atoms")]
    EndpointOutOfRange(usize, usize),
    #[error("self-loop bond on atom {0}")]
    SelfLoop(usize),
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
    #[error("aromatic bond between atoms {0} and {1} requires both atoms aromatic")]
    AromaticBondEndpoints(usize, usize),
    #[error("formal charge {0} outside [{MIN_CHARGE},{MAX_CHARGE}]")]
    ChargeOutOfRange(i8),
    #[error("duplicate map label {0}")]
    DuplicateMapLabel(u32),
}

/// A molecule as an immutable labeled undirected graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<MolGraph, GraphError> {
        let n = atoms.len();
        for atom in &atoms {
            if atom.formal_charge < MIN_CHARGE || atom.formal_charge > MAX_CHARGE {
                return Err(GraphError::ChargeOutOfRange(atom.formal_charge));
            }
        }
        let mut seen_maps = std::collections::HashSet::new();
        for atom in &atoms {
            if let Some(m) = atom.map_label {
                if !seen_maps.insert(m) {
                    return Err(GraphError::DuplicateMapLabel(m));
                }
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut seen_pairs = std::collections::HashSet::new();
        for (i, bond) in bonds.iter().enumerate() {
            if bond.a >= n {
                return Err(GraphError::EndpointOutOfRange(bond.a, n));
            }
            if bond.b >= n {
                return Err(GraphError::EndpointOutOfRange(bond.b, n));
            }
            if bond.a == bond.b {
                return Err(GraphError::SelfLoop(bond.a));
            }
            let key = (bond.a.min(bond.b), bond.a.max(bond.b));
            if !seen_pairs.insert(key) {
                return Err(GraphError::DuplicateBond(key.0, key.1));
            }
            if bond.order == BondOrder::Aromatic
                && !(atoms[bond.a].aromatic && atoms[bond.b].aromatic)
            {
                return Err(GraphError::AromaticBondEndpoints(bond.a, bond.b));
            }
            adjacency[bond.a].push((bond.b, i));
            adjacency[bond.b].push((bond.a, i));
        }
        Ok(MolGraph {
            atoms,
            bonds,
            adjacency,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn atom(&self, i: usize) -> &Atom {
        &self.atoms[i]
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bond(&self, i: usize) -> &Bond {
        &self.bonds[i]
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    /// Incident (neighbor, bond index) pairs of atom `v`.
    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adjacency[a]
            .iter()
            .find(|(nb, _)| *nb == b)
            .map(|(_, bi)| &self.bonds[*bi])
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.atoms.len()];
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
        count == self.atoms.len()
    }

    /// A copy with atoms reordered so that new index `perm[i]` holds old atom `i`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = vec![Atom::new(Element::C); self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old];
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
            })
            .collect();
        MolGraph::new(atoms, bonds).expect("permutation preserves validity")
    }

    /// A copy with all map labels removed.
    pub fn without_maps(&self) -> MolGraph {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                map_label: None,
                ..*a
            })
            .collect();
        MolGraph::new(atoms, self.bonds.clone()).expect("stripping maps preserves validity")
    }

    pub fn atom_by_map(&self, map: u32) -> Option<usize> {
        self.atoms.iter().position(|a| a.map_label == Some(map))
    }
}

/// Canonical key: equal iff the molecules are isomorphic respecting element,
/// charge, aromaticity and explicit hydrogen counts (map labels ignored).
/// The key is the canonical line notation, so it doubles as a writable form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalKey(pub String);

impl std::fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical line notation for `mol`. Map labels are stripped: isomorphic
/// inputs, which by definition may differ in maps, must write identically.
///
/// Panics if the molecule is disconnected (unwritable in a dot-free grammar);
/// parser- and rewrite-produced molecules are always connected.
pub fn write_molecule(mol: &MolGraph) -> String {
    notation::write_molecule_canonical(mol)
}

pub fn canonical_key(mol: &MolGraph) -> CanonicalKey {
    CanonicalKey(write_molecule(mol))
}

/// Sorted canonical keys of a reactant set, the multiset identity used for
/// candidate dedup and exact-match comparison.
pub fn key_multiset(mols: &[MolGraph]) -> Vec<CanonicalKey> {
    let mut keys: Vec<CanonicalKey> = mols.iter().map(canonical_key).collect();
    keys.sort();
    keys
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_self_loop_and_duplicate_bonds() {
        let atoms = vec![Atom::new(Element::C), Atom::new(Element::C)];
        let err = MolGraph::new(
            atoms.clone(),
            vec![Bond {
                a: 0,
                b: 0,
                order: BondOrder::Single,
            }],
        )
        .unwrap_err();
        assert_eq!(err, GraphError::SelfLoop(0));

        let err = MolGraph::new(
            atoms,
            vec![
                Bond {
                    a: 0,
                    b: 1,
                    order: BondOrder::Single,
                },
                Bond {
                    a: 1,
                    b: 0,
                    order: BondOrder::Double,
                },
            ],
        )
        .unwrap_err();
        assert_eq!(err, GraphError::DuplicateBond(0, 1));
    }

    #[test]
    fn aromatic_bond_requires_aromatic_atoms() {
        let atoms = vec![Atom::new(Element::C), Atom::new(Element::C)];
        let err = MolGraph::new(
            atoms,
            vec![Bond {
                a: 0,
                b: 1,
                order: BondOrder::Aromatic,
            }],
        )
        .unwrap_err();
        assert_eq!(err, GraphError::AromaticBondEndpoints(0, 1));
    }

    #[test]
    fn adjacency_consistent_with_bonds() {
        let mol = parse_molecule("CC(=O)O").unwrap();
        // Rebuild adjacency from the bond list and compare.
        let mut rebuilt = vec![Vec::new(); mol.n_atoms()];
        for (i, b) in mol.bonds().iter().enumerate() {
            rebuilt[b.a].push((b.b, i));
            rebuilt[b.b].push((b.a, i));
        }
        for v in 0..mol.n_atoms() {
            assert_eq!(mol.neighbors(v), &rebuilt[v][..]);
        }
    }
}
