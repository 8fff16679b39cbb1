//! Exhaustive label-respecting isomorphism check, used as the independent
//! test oracle for canonical keys. Backtracking over all injective atom
//! assignments; deliberately simple and bounded in size.

use super::{Atom, MolGraph};
use thiserror::Error;

pub const DEFAULT_ORACLE_LIMIT: usize = 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("graph with {atoms} atoms exceeds the oracle bound of {limit}")]
    TooLarge { atoms: usize, limit: usize },
}

/// True iff a full isomorphism exists respecting element, charge,
/// aromaticity, explicit H count and bond order. Map labels are ignored.
pub fn graph_isomorphic(a: &MolGraph, b: &MolGraph) -> Result<bool, OracleError> {
    graph_isomorphic_with_limit(a, b, DEFAULT_ORACLE_LIMIT)
}

pub fn graph_isomorphic_with_limit(
    a: &MolGraph,
    b: &MolGraph,
    limit: usize,
) -> Result<bool, OracleError> {
    let n = a.n_atoms().max(b.n_atoms());
    if n > limit {
        return Err(OracleError::TooLarge { atoms: n, limit });
    }
    if a.n_atoms() != b.n_atoms() || a.n_bonds() != b.n_bonds() {
        return Ok(false);
    }
    // Quick reject: attribute-plus-degree multisets must agree.
    let profile = |m: &MolGraph| {
        let mut p: Vec<_> = (0..m.n_atoms())
            .map(|v| (m.atom(v).iso_label(), m.degree(v)))
            .collect();
        p.sort();
        p
    };
    if profile(a) != profile(b) {
        return Ok(false);
    }
    let mut mapping = vec![usize::MAX; a.n_atoms()];
    let mut used = vec![false; b.n_atoms()];
    Ok(assign(a, b, 0, &mut mapping, &mut used))
}

fn compatible(x: &Atom, y: &Atom) -> bool {
    x.iso_label() == y.iso_label()
}

fn assign(a: &MolGraph, b: &MolGraph, v: usize, mapping: &mut [usize], used: &mut [bool]) -> bool {
    if v == a.n_atoms() {
        return true;
    }
    'cand: for w in 0..b.n_atoms() {
        if used[w] || !compatible(a.atom(v), b.atom(w)) || a.degree(v) != b.degree(w) {
            continue;
        }
        // Every already-mapped neighbor of v must be adjacent to w with the
        // same bond order, and vice versa for mapped neighbors of w.
        for &(u, bi) in a.neighbors(v) {
            if mapping[u] != usize::MAX {
                match b.bond_between(w, mapping[u]) {
                    Some(bond) if bond.order == a.bond(bi).order => {}
                    _ => continue 'cand,
                }
            }
        }
        for &(x, bi) in b.neighbors(w) {
            if let Some(src) = mapping.iter().position(|&m| m == x) {
                match a.bond_between(v, src) {
                    Some(bond) if bond.order == b.bond(bi).order => {}
                    _ => continue 'cand,
                }
            }
        }
        mapping[v] = w;
        used[w] = true;
        if assign(a, b, v + 1, mapping, used) {
            return true;
        }
        mapping[v] = usize::MAX;
        used[w] = false;
    }
    false
}
