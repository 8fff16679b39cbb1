//! Retrosynthesis templates: extraction from atom-mapped reactions, the two
//! matching predicates, and application of a rule to a product molecule.
//!
//! A template is a rewrite rule `o -> r_1 + ... + r_N`: a product-side
//! pattern and one pattern per generated reactant, with shared map labels
//! defining the atom correspondence. Application enumerates every embedding
//! of `o`, instantiates the reactant patterns, carries the remainder of the
//! product over to whichever fragment it stays attached to, and dedups the
//! results by canonical reactant keys.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::chem::{key_multiset, Atom, Bond, BondOrder, CanonicalKey, MolGraph};
use crate::pattern::{
    self, find_matches, parse_pattern, BondConstraint, PatternGraph, PatternNode,
};
use thiserror::Error;

pub const MAX_TEMPLATE_ARITY: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("product atom {0} has no map label")]
    UnmappedProductAtom(usize),
    #[error("reaction changes nothing: empty center")]
    EmptyCenter,
    #[error("reaction center is not a single connected fragment")]
    DisconnectedCenter,
    #[error("pattern for reactant {0} is not connected")]
    DisconnectedReactantPattern(usize),
    #[error("reactant {0} contributes no atoms to the template")]
    SpectatorReactant(usize),
    #[error("template has {0} reactant patterns, limit is {MAX_TEMPLATE_ARITY}")]
    ArityLimit(usize),
    #[error("reactant-pattern map {0} does not occur in the product pattern")]
    MapNotInProductPattern(u32),
    #[error("product-pattern map {0} occurs in no reactant pattern")]
    UnassignedProductMap(u32),
    #[error("map {0} occurs in more than one reactant pattern")]
    DuplicateMapAcrossReactants(u32),
    #[error("leaving-group atom lacks element/aromatic/charge needed to instantiate it")]
    UnderspecifiedLeavingAtom,
    #[error("wildcard bond on the reactant side cannot be instantiated")]
    WildcardReactantBond,
    #[error("template must have at least one reactant pattern")]
    NoReactants,
    #[error("bad record: {0}")]
    BadRecord(String),
}

/// One atom-mapped reaction: a single product and its reactant set.
#[derive(Debug, Clone)]
pub struct ReactionRecord {
    pub record_id: String,
    pub product: MolGraph,
    pub reactants: Vec<MolGraph>,
    pub reaction_class: Option<u8>,
}

impl ReactionRecord {
    /// Ingestion invariants: every product atom mapped, product maps present
    /// among reactant maps, maps unique across the reactant side.
    pub fn validate(&self) -> Result<(), TemplateError> {
        let mut reactant_maps = HashSet::new();
        for r in &self.reactants {
            for a in r.atoms() {
                if let Some(m) = a.map_label {
                    if !reactant_maps.insert(m) {
                        return Err(TemplateError::BadRecord(format!(
                            "map {m} occurs in more than one reactant"
                        )));
                    }
                }
            }
        }
        for (i, a) in self.product.atoms().iter().enumerate() {
            match a.map_label {
                None => return Err(TemplateError::UnmappedProductAtom(i)),
                Some(m) => {
                    if !reactant_maps.contains(&m) {
                        return Err(TemplateError::BadRecord(format!(
                            "product map {m} missing from reactants"
                        )));
                    }
                }
            }
        }
        if let Some(c) = self.reaction_class {
            if !(1..=10).contains(&c) {
                return Err(TemplateError::BadRecord(format!(
                    "reaction class {c} outside [1,10]"
                )));
            }
        }
        Ok(())
    }

    /// The ground-truth reactant identity used for exact match.
    pub fn truth_keys(&self) -> Vec<CanonicalKey> {
        key_multiset(&self.reactants)
    }
}

/// A retrosynthesis rewrite rule with canonically renumbered map labels.
/// `template_key` is its canonical text `o>>r_1.r_2...`, the dedup identity;
/// `center_key` identifies the product-side pattern with maps stripped.
#[derive(Debug, Clone)]
pub struct RetroTemplate {
    product_pattern: PatternGraph,
    reactant_patterns: Vec<PatternGraph>,
    class_tag: Option<u8>,
    template_key: String,
    center_key: String,
}

impl RetroTemplate {
    /// Build and canonicalize a template from raw patterns.
    pub fn from_parts(
        product_pattern: PatternGraph,
        reactant_patterns: Vec<PatternGraph>,
        class_tag: Option<u8>,
    ) -> Result<RetroTemplate, TemplateError> {
        if reactant_patterns.is_empty() {
            return Err(TemplateError::NoReactants);
        }
        if reactant_patterns.len() > MAX_TEMPLATE_ARITY {
            return Err(TemplateError::ArityLimit(reactant_patterns.len()));
        }
        let o_maps: HashSet<u32> = product_pattern
            .nodes()
            .iter()
            .filter_map(|n| n.map_label)
            .collect();
        let mut seen = HashSet::new();
        for r in &reactant_patterns {
            for node in r.nodes() {
                match node.map_label {
                    Some(m) => {
                        if !o_maps.contains(&m) {
                            return Err(TemplateError::MapNotInProductPattern(m));
                        }
                        if !seen.insert(m) {
                            return Err(TemplateError::DuplicateMapAcrossReactants(m));
                        }
                    }
                    None => {
                        if node.element.is_none()
                            || node.aromatic.is_none()
                            || node.charge.is_none()
                        {
                            return Err(TemplateError::UnderspecifiedLeavingAtom);
                        }
                    }
                }
            }
            for e in r.edges() {
                if e.constraint == BondConstraint::Any {
                    return Err(TemplateError::WildcardReactantBond);
                }
            }
        }
        for &m in &o_maps {
            if !seen.contains(&m) {
                return Err(TemplateError::UnassignedProductMap(m));
            }
        }

        // Canonical map renumbering: try every minimal labeling of the
        // product pattern (maps excluded from its invariant), renumber maps in
        // rank order, and keep the lexicographically smallest full rule text.
        let labelings = pattern::minimal_labelings_ignoring_maps(&product_pattern);
        let mut best: Option<(String, PatternGraph, Vec<(String, PatternGraph)>)> = None;
        for rank in &labelings {
            let mut order: Vec<usize> = (0..product_pattern.n_nodes()).collect();
            order.sort_by_key(|&v| rank[v]);
            let mut translate: HashMap<u32, u32> = HashMap::new();
            for &v in &order {
                if let Some(m) = product_pattern.node(v).map_label {
                    let next = translate.len() as u32 + 1;
                    translate.insert(m, next);
                }
            }
            let o2 = product_pattern.with_maps_rewritten(|m| translate.get(&m).copied());
            let o_text = pattern::write_pattern_with_ranks(&o2, rank);
            let mut rs: Vec<(String, PatternGraph)> = reactant_patterns
                .iter()
                .map(|r| {
                    let r2 = r.with_maps_rewritten(|m| translate.get(&m).copied());
                    (pattern::write_pattern_mapped(&r2), r2)
                })
                .collect();
            rs.sort_by(|a, b| a.0.cmp(&b.0));
            let key = format!(
                "{o_text}>>{}",
                rs.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join(".")
            );
            let better = match &best {
                None => true,
                Some((k, _, _)) => key < *k,
            };
            if better {
                best = Some((key, o2, rs));
            }
        }
        let (template_key, o2, rs) = best.expect("at least one labeling");
        let center_key = pattern::pattern_key(&o2);
        Ok(RetroTemplate {
            product_pattern: o2,
            reactant_patterns: rs.into_iter().map(|(_, r)| r).collect(),
            class_tag,
            template_key,
            center_key,
        })
    }

    pub fn product_pattern(&self) -> &PatternGraph {
        &self.product_pattern
    }

    pub fn reactant_patterns(&self) -> &[PatternGraph] {
        &self.reactant_patterns
    }

    pub fn n_reactants(&self) -> usize {
        self.reactant_patterns.len()
    }

    pub fn class_tag(&self) -> Option<u8> {
        self.class_tag
    }

    pub fn template_key(&self) -> &str {
        &self.template_key
    }

    pub fn center_key(&self) -> &str {
        &self.center_key
    }
}

/// Deduplicated template store, ordered by template key.
#[derive(Debug, Clone, Default)]
pub struct TemplateTable {
    templates: Vec<RetroTemplate>,
    by_key: HashMap<String, usize>,
}

impl TemplateTable {
    pub fn from_templates(templates: impl IntoIterator<Item = RetroTemplate>) -> TemplateTable {
        let mut uniq: BTreeMap<String, RetroTemplate> = BTreeMap::new();
        for t in templates {
            uniq.entry(t.template_key.clone()).or_insert(t);
        }
        let templates: Vec<RetroTemplate> = uniq.into_values().collect();
        let by_key = templates
            .iter()
            .enumerate()
            .map(|(i, t)| (t.template_key.clone(), i))
            .collect();
        TemplateTable { templates, by_key }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, i: usize) -> &RetroTemplate {
        &self.templates[i]
    }

    pub fn templates(&self) -> &[RetroTemplate] {
        &self.templates
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.by_key.get(key).copied()
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.by_key.contains_key(key)
    }
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Extract the rewrite rule a record realizes. The reaction center is every
/// mapped atom whose bonds to counterpart-having neighbors, charge or
/// explicit H count differ between the two sides (an absent-on-product
/// neighbor counts as a difference), expanded by `radius` bond hops on the
/// product side; leaving groups are the absent reactant atoms connected to
/// the center.
pub fn extract_template(rxn: &ReactionRecord, radius: usize) -> Result<RetroTemplate, TemplateError> {
    rxn.validate()?;
    let product = &rxn.product;
    // map label -> product atom / reactant (molecule, atom)
    let mut prod_of: HashMap<u32, usize> = HashMap::new();
    for (i, a) in product.atoms().iter().enumerate() {
        prod_of.insert(a.map_label.expect("validated"), i);
    }
    let mut react_of: HashMap<u32, (usize, usize)> = HashMap::new();
    for (ri, r) in rxn.reactants.iter().enumerate() {
        for (ai, a) in r.atoms().iter().enumerate() {
            if let Some(m) = a.map_label {
                react_of.insert(m, (ri, ai));
            }
        }
    }
    // An atom "has a counterpart" iff its map occurs on the product side.
    let has_counterpart =
        |a: &Atom| a.map_label.map_or(false, |m| prod_of.contains_key(&m));

    let mut center: Vec<u32> = Vec::new();
    for (pi, pa) in product.atoms().iter().enumerate() {
        let m = pa.map_label.expect("validated");
        let &(ri, ai) = react_of.get(&m).expect("validated");
        let ra = rxn.reactants[ri].atom(ai);
        if pa.formal_charge != ra.formal_charge || pa.explicit_h != ra.explicit_h {
            center.push(m);
            continue;
        }
        let mut pset: Vec<(u32, BondOrder)> = product
            .neighbors(pi)
            .iter()
            .map(|&(u, bi)| (product.atom(u).map_label.expect("validated"), product.bond(bi).order))
            .collect();
        pset.sort_unstable();
        let mut rset: Vec<(u32, BondOrder)> = Vec::new();
        let mut absent_neighbor = false;
        for &(u, bi) in rxn.reactants[ri].neighbors(ai) {
            let ua = rxn.reactants[ri].atom(u);
            if has_counterpart(ua) {
                rset.push((ua.map_label.expect("has map"), rxn.reactants[ri].bond(bi).order));
            } else {
                absent_neighbor = true;
            }
        }
        rset.sort_unstable();
        if absent_neighbor || pset != rset {
            center.push(m);
        }
    }
    if center.is_empty() {
        return Err(TemplateError::EmptyCenter);
    }

    // Radius expansion on the product side.
    let mut included: HashSet<usize> = center
        .iter()
        .map(|m| *prod_of.get(m).expect("product map"))
        .collect();
    for _ in 0..radius {
        let frontier: Vec<usize> = included
            .iter()
            .flat_map(|&v| product.neighbors(v).iter().map(|&(u, _)| u))
            .collect();
        included.extend(frontier);
    }
    let mut included: Vec<usize> = included.into_iter().collect();
    included.sort_unstable();

    // Product pattern: induced subgraph with constraints fixed to the
    // observed element/charge/aromaticity. H counts never constrain the
    // product side, so the rule generalizes across written H conventions.
    let mut o_nodes = Vec::new();
    let mut o_index: HashMap<usize, usize> = HashMap::new();
    for &v in &included {
        let a = product.atom(v);
        o_index.insert(v, o_nodes.len());
        o_nodes.push(PatternNode {
            element: Some(a.element),
            aromatic: Some(a.aromatic),
            charge: Some(a.formal_charge),
            hcount: None,
            map_label: a.map_label,
        });
    }
    let mut o_edges = Vec::new();
    for b in product.bonds() {
        if let (Some(&x), Some(&y)) = (o_index.get(&b.a), o_index.get(&b.b)) {
            o_edges.push(crate::pattern::PatternEdge {
                a: x,
                b: y,
                constraint: BondConstraint::Order(b.order),
            });
        }
    }
    let product_pattern = PatternGraph::new(o_nodes, o_edges)
        .map_err(|_| TemplateError::DisconnectedCenter)?;

    let included_maps: HashSet<u32> = included
        .iter()
        .map(|&v| product.atom(v).map_label.expect("validated"))
        .collect();
    let center_maps: HashSet<u32> = center.iter().copied().collect();

    // Reactant patterns: counterparts of the included maps plus the absent
    // atoms transitively connected to the center.
    let mut reactant_patterns = Vec::new();
    for (ri, r) in rxn.reactants.iter().enumerate() {
        let mut atoms: HashSet<usize> = HashSet::new();
        for (ai, a) in r.atoms().iter().enumerate() {
            if let Some(m) = a.map_label {
                if included_maps.contains(&m) {
                    atoms.insert(ai);
                }
            }
        }
        // Leaving closure: absent atoms reachable from center counterparts
        // through absent atoms.
        let mut queue: Vec<usize> = Vec::new();
        let seeds: Vec<usize> = atoms
            .iter()
            .copied()
            .filter(|&ai| {
                let m = r.atom(ai).map_label.expect("included implies mapped");
                center_maps.contains(&m)
            })
            .collect();
        for ai in seeds {
            for &(u, _) in r.neighbors(ai) {
                if !has_counterpart(r.atom(u)) && atoms.insert(u) {
                    queue.push(u);
                }
            }
        }
        while let Some(v) = queue.pop() {
            for &(u, _) in r.neighbors(v) {
                if !has_counterpart(r.atom(u)) && atoms.insert(u) {
                    queue.push(u);
                }
            }
        }
        if atoms.is_empty() {
            return Err(TemplateError::SpectatorReactant(ri));
        }
        let mut atom_list: Vec<usize> = atoms.into_iter().collect();
        atom_list.sort_unstable();
        let mut nodes = Vec::new();
        let mut index: HashMap<usize, usize> = HashMap::new();
        for &ai in &atom_list {
            let a = r.atom(ai);
            let mapped_counterpart = a
                .map_label
                .filter(|m| prod_of.contains_key(m))
                .map(|m| product.atom(prod_of[&m]));
            let hcount = match mapped_counterpart {
                // Written only when the H count changes across the reaction.
                Some(pa) if pa.explicit_h == a.explicit_h => None,
                Some(_) => Some(a.explicit_h),
                None => {
                    if a.explicit_h == 0 {
                        None
                    } else {
                        Some(a.explicit_h)
                    }
                }
            };
            index.insert(ai, nodes.len());
            nodes.push(PatternNode {
                element: Some(a.element),
                aromatic: Some(a.aromatic),
                charge: Some(a.formal_charge),
                hcount,
                map_label: a.map_label.filter(|m| prod_of.contains_key(m)),
            });
        }
        let mut edges = Vec::new();
        for b in r.bonds() {
            if let (Some(&x), Some(&y)) = (index.get(&b.a), index.get(&b.b)) {
                edges.push(crate::pattern::PatternEdge {
                    a: x,
                    b: y,
                    constraint: BondConstraint::Order(b.order),
                });
            }
        }
        let pat = PatternGraph::new(nodes, edges)
            .map_err(|_| TemplateError::DisconnectedReactantPattern(ri))?;
        reactant_patterns.push(pat);
    }

    RetroTemplate::from_parts(product_pattern, reactant_patterns, rxn.reaction_class)
}

// ---------------------------------------------------------------------------
// Predicates
// ---------------------------------------------------------------------------

/// Template applicability: the product pattern embeds in `product` and the
/// rule is a member of the known set.
pub fn phi_match_template(product: &MolGraph, t: &RetroTemplate, known: &TemplateTable) -> bool {
    known.contains_key(&t.template_key) && pattern::contains(&t.product_pattern, product)
}

/// Reactant-set consistency: the product pattern embeds in `product`, the
/// cardinalities agree, and some permutation aligns every reactant pattern
/// with a reactant. The permutation search is brute force, so template
/// arity is capped.
pub fn phi_match_reactants(
    product: &MolGraph,
    t: &RetroTemplate,
    reactants: &[MolGraph],
) -> Result<bool, TemplateError> {
    let n = t.n_reactants();
    if n > MAX_TEMPLATE_ARITY {
        return Err(TemplateError::ArityLimit(n));
    }
    if reactants.len() != n || !pattern::contains(&t.product_pattern, product) {
        return Ok(false);
    }
    let hit: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| pattern::contains(&t.reactant_patterns[i], &reactants[j]))
                .collect()
        })
        .collect();
    Ok(permutation_exists(&hit))
}

fn permutation_exists(hit: &[Vec<bool>]) -> bool {
    fn go(hit: &[Vec<bool>], i: usize, used: &mut [bool]) -> bool {
        if i == hit.len() {
            return true;
        }
        for j in 0..hit.len() {
            if !used[j] && hit[i][j] {
                used[j] = true;
                if go(hit, i + 1, used) {
                    return true;
                }
                used[j] = false;
            }
        }
        false
    }
    let mut used = vec![false; hit.len()];
    go(hit, 0, &mut used)
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

/// One candidate reactant set plus its dedup identity.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub mols: Vec<MolGraph>,
    pub keys: Vec<CanonicalKey>,
}

/// Apply a rule to a product: for each embedding of the product pattern,
/// instantiate the reactant patterns (pattern-written attributes win over
/// the matched product atom's), then copy every unmatched product atom into
/// the fragment it remains attached to. Embeddings that strand an unmatched
/// atom between zero or several fragments are discarded; results are
/// deduplicated by canonical key multiset and sorted.
pub fn apply_template(t: &RetroTemplate, product: &MolGraph) -> Vec<CandidateSet> {
    let o = &t.product_pattern;
    let mut results: BTreeMap<Vec<CanonicalKey>, Vec<MolGraph>> = BTreeMap::new();
    'matches: for m in find_matches(o, product) {
        let mut matched = vec![false; product.n_atoms()];
        for &a in &m.assignment {
            matched[a] = true;
        }
        // Reactant index owning each map label.
        let mut owner_of_map: HashMap<u32, usize> = HashMap::new();
        for (ri, r) in t.reactant_patterns.iter().enumerate() {
            for node in r.nodes() {
                if let Some(mp) = node.map_label {
                    owner_of_map.insert(mp, ri);
                }
            }
        }
        // Assign every unmatched atom to a reactant by flood fill from the
        // matched boundary.
        let n = product.n_atoms();
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut comp: Vec<Option<usize>> = vec![None; n];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for v in 0..n {
            if matched[v] || comp[v].is_some() {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![v];
            comp[v] = Some(id);
            let mut members = vec![v];
            while let Some(x) = stack.pop() {
                for &(u, _) in product.neighbors(x) {
                    if !matched[u] && comp[u].is_none() {
                        comp[u] = Some(id);
                        members.push(u);
                        stack.push(u);
                    }
                }
            }
            comps.push(members);
        }
        let mut comp_owner: Vec<Option<usize>> = vec![None; comps.len()];
        for (cid, members) in comps.iter().enumerate() {
            let mut owners: HashSet<usize> = HashSet::new();
            let mut dangling = false;
            for &v in members {
                for &(u, _) in product.neighbors(v) {
                    if matched[u] {
                        let onode = m.assignment.iter().position(|&a| a == u).expect("matched");
                        match o.node(onode).map_label.and_then(|mp| owner_of_map.get(&mp)) {
                            Some(&ri) => {
                                owners.insert(ri);
                            }
                            // Attached to a consumed (map-less) pattern atom.
                            None => dangling = true,
                        }
                    }
                }
            }
            if dangling || owners.len() != 1 {
                continue 'matches;
            }
            comp_owner[cid] = owners.into_iter().next();
        }
        for v in 0..n {
            if let Some(cid) = comp[v] {
                owner[v] = comp_owner[cid];
            }
        }

        // Instantiate each reactant.
        let mut mols = Vec::with_capacity(t.n_reactants());
        for (ri, rpat) in t.reactant_patterns.iter().enumerate() {
            let mut atoms: Vec<Atom> = Vec::new();
            let mut bonds: Vec<Bond> = Vec::new();
            let mut node_pos: Vec<usize> = Vec::with_capacity(rpat.n_nodes());
            for node in rpat.nodes() {
                let matched_atom = node.map_label.map(|mp| {
                    let onode = o.node_by_map(mp).expect("validated correspondence");
                    product.atom(m.assignment[onode])
                });
                let atom = match matched_atom {
                    Some(pa) => Atom {
                        element: node.element.unwrap_or(pa.element),
                        aromatic: node.aromatic.unwrap_or(pa.aromatic),
                        formal_charge: node.charge.unwrap_or(pa.formal_charge),
                        explicit_h: node.hcount.unwrap_or(pa.explicit_h),
                        map_label: None,
                    },
                    None => Atom {
                        element: node.element.expect("validated leaving atom"),
                        aromatic: node.aromatic.expect("validated leaving atom"),
                        formal_charge: node.charge.expect("validated leaving atom"),
                        explicit_h: node.hcount.unwrap_or(0),
                        map_label: None,
                    },
                };
                node_pos.push(atoms.len());
                atoms.push(atom);
            }
            for e in rpat.edges() {
                let order = match e.constraint {
                    BondConstraint::Order(o) => o,
                    BondConstraint::Any => unreachable!("validated at construction"),
                };
                bonds.push(Bond {
                    a: node_pos[e.a],
                    b: node_pos[e.b],
                    order,
                });
            }
            // Context atoms owned by this reactant.
            let mut ctx_pos: HashMap<usize, usize> = HashMap::new();
            for v in 0..n {
                if owner[v] == Some(ri) {
                    ctx_pos.insert(v, atoms.len());
                    let pa = product.atom(v);
                    atoms.push(Atom {
                        map_label: None,
                        ..*pa
                    });
                }
            }
            for b in product.bonds() {
                match (ctx_pos.get(&b.a), ctx_pos.get(&b.b)) {
                    (Some(&x), Some(&y)) => bonds.push(Bond {
                        a: x,
                        b: y,
                        order: b.order,
                    }),
                    (Some(&x), None) if matched[b.b] => {
                        if let Some(y) = instantiated_pos(o, &m.assignment, rpat, &node_pos, b.b) {
                            bonds.push(Bond {
                                a: x,
                                b: y,
                                order: b.order,
                            });
                        } else {
                            continue 'matches;
                        }
                    }
                    (None, Some(&y)) if matched[b.a] => {
                        if let Some(x) = instantiated_pos(o, &m.assignment, rpat, &node_pos, b.a) {
                            bonds.push(Bond {
                                a: x,
                                b: y,
                                order: b.order,
                            });
                        } else {
                            continue 'matches;
                        }
                    }
                    _ => {}
                }
            }
            match MolGraph::new(atoms, bonds) {
                Ok(mol) => mols.push(mol),
                // Chemically inconsistent instantiation (e.g. an aromatic
                // bond copied onto a de-aromatized atom): skip the embedding.
                Err(_) => continue 'matches,
            }
        }
        let keys = key_multiset(&mols);
        results.entry(keys.clone()).or_insert(mols);
    }
    results
        .into_iter()
        .map(|(keys, mols)| CandidateSet { mols, keys })
        .collect()
}

/// Position, in the reactant under construction, of the instantiated atom
/// that matched product atom `pa`. None when the owning pattern differs.
fn instantiated_pos(
    o: &PatternGraph,
    assignment: &[usize],
    rpat: &PatternGraph,
    node_pos: &[usize],
    pa: usize,
) -> Option<usize> {
    let onode = assignment.iter().position(|&a| a == pa)?;
    let map = o.node(onode).map_label?;
    let rnode = rpat.node_by_map(map)?;
    Some(node_pos[rnode])
}

// ---------------------------------------------------------------------------
// Template file format
// ---------------------------------------------------------------------------

/// Outcome of loading a template file: rejected lines are collected, not
/// fatal, so dialect-incompatible rules degrade to a reported count.
#[derive(Debug, Default)]
pub struct TemplateLoadReport {
    pub parsed: usize,
    pub duplicates: usize,
    pub rejected: Vec<(usize, String)>,
}

/// Parse one `o>>r_1.r_2<TAB>class` line.
pub fn parse_template_line(line: &str) -> Result<RetroTemplate, String> {
    let (rule, class) = match line.split_once('\t') {
        Some((r, c)) => (r, c.trim()),
        None => (line, ""),
    };
    let class_tag = match class {
        "" | "-" => None,
        c => Some(
            c.parse::<u8>()
                .ok()
                .filter(|v| (1..=10).contains(v))
                .ok_or_else(|| format!("bad class tag '{c}'"))?,
        ),
    };
    let (o_text, r_text) = rule
        .split_once(">>")
        .ok_or_else(|| "missing '>>'".to_string())?;
    let product_pattern = parse_pattern(o_text).map_err(|e| format!("product pattern: {e}"))?;
    let mut reactant_patterns = Vec::new();
    for part in r_text.split('.') {
        reactant_patterns.push(parse_pattern(part).map_err(|e| format!("reactant pattern: {e}"))?);
    }
    RetroTemplate::from_parts(product_pattern, reactant_patterns, class_tag)
        .map_err(|e| e.to_string())
}

pub fn format_template_line(t: &RetroTemplate) -> String {
    match t.class_tag {
        Some(c) => format!("{}\t{c}", t.template_key),
        None => format!("{}\t-", t.template_key),
    }
}

pub fn load_templates_str(text: &str) -> (TemplateTable, TemplateLoadReport) {
    let mut report = TemplateLoadReport::default();
    let mut templates = Vec::new();
    let mut keys = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_template_line(line) {
            Ok(t) => {
                if keys.insert(t.template_key.clone()) {
                    report.parsed += 1;
                    templates.push(t);
                } else {
                    report.duplicates += 1;
                }
            }
            Err(e) => report.rejected.push((i + 1, e)),
        }
    }
    (TemplateTable::from_templates(templates), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{canonical_key, parse_molecule};

    fn record(id: &str, reactants: &[&str], product: &str, class: Option<u8>) -> ReactionRecord {
        ReactionRecord {
            record_id: id.to_string(),
            product: parse_molecule(product).unwrap(),
            reactants: reactants.iter().map(|s| parse_molecule(s).unwrap()).collect(),
            reaction_class: class,
        }
    }

    fn ester_record() -> ReactionRecord {
        // Esterification written in the bracket-H convention.
        record(
            "ester",
            &["[CH3:1][C:2](=[O:3])[OH:4]", "[OH:9][CH3:8]"],
            "[CH3:1][C:2](=[O:3])[O:4][CH3:8]",
            Some(1),
        )
    }

    #[test]
    fn ester_extraction_roundtrips_at_radius_zero() {
        let rxn = ester_record();
        let t = extract_template(&rxn, 0).unwrap();
        assert_eq!(t.n_reactants(), 2);
        let candidates = apply_template(&t, &rxn.product);
        let truth = rxn.truth_keys();
        assert!(
            candidates.iter().any(|c| c.keys == truth),
            "truth not regenerated: {:?}",
            candidates.iter().map(|c| &c.keys).collect::<Vec<_>>()
        );
    }

    #[test]
    fn identity_reaction_has_empty_center() {
        let rxn = record("idn", &["[CH3:1][OH:2]"], "[CH3:1][OH:2]", None);
        assert_eq!(extract_template(&rxn, 1).unwrap_err(), TemplateError::EmptyCenter);
    }

    #[test]
    fn unmapped_product_atom_rejected() {
        let rxn = record("bad", &["[CH3:1]O"], "[CH3:1]O", None);
        assert_eq!(
            extract_template(&rxn, 0).unwrap_err(),
            TemplateError::UnmappedProductAtom(1)
        );
    }

    #[test]
    fn ester_template_applies_to_plain_methyl_acetate() {
        // Extract from a bare-atom (H-less) record, then rewrite a fresh
        // product written without any bracket conventions.
        let rxn = record(
            "ester0",
            &["[CH3:1][C:2](=[O:3])[O:4]", "[O:9][CH3:8]"],
            "[CH3:1][C:2](=[O:3])[O:4][CH3:8]",
            None,
        );
        let t = extract_template(&rxn, 0).unwrap();
        let product = parse_molecule("CC(=O)OC").unwrap();
        let candidates = apply_template(&t, &product);
        assert_eq!(candidates.len(), 1, "automorphic embeddings dedup to one set");
        let mut expected = vec![
            canonical_key(&parse_molecule("CC(=O)O").unwrap()),
            canonical_key(&parse_molecule("CO").unwrap()),
        ];
        expected.sort();
        assert_eq!(candidates[0].keys, expected);
    }

    #[test]
    fn absent_pattern_gives_no_candidates() {
        let rxn = ester_record();
        let t = extract_template(&rxn, 0).unwrap();
        let ethane = parse_molecule("CC").unwrap();
        assert!(apply_template(&t, &ethane).is_empty());
    }

    #[test]
    fn phi_template_checks_pattern_and_membership() {
        let rxn = ester_record();
        let t = extract_template(&rxn, 0).unwrap();
        let table = TemplateTable::from_templates([t.clone()]);
        let empty = TemplateTable::default();
        assert!(phi_match_template(&rxn.product, &t, &table));
        assert!(!phi_match_template(&parse_molecule("CC").unwrap(), &t, &table));
        assert!(!phi_match_template(&rxn.product, &t, &empty));
    }

    #[test]
    fn phi_reactants_cardinality_and_permutation() {
        let rxn = ester_record();
        let t = extract_template(&rxn, 0).unwrap();
        // Truth in either order.
        let fwd = rxn.reactants.clone();
        let mut rev = rxn.reactants.clone();
        rev.reverse();
        assert!(phi_match_reactants(&rxn.product, &t, &fwd).unwrap());
        assert!(phi_match_reactants(&rxn.product, &t, &rev).unwrap());
        // Wrong cardinality.
        assert!(!phi_match_reactants(&rxn.product, &t, &fwd[..1]).unwrap());
        // No acid fragment.
        let bad = vec![
            parse_molecule("CC").unwrap(),
            parse_molecule("[OH:9][CH3:8]").unwrap(),
        ];
        assert!(!phi_match_reactants(&rxn.product, &t, &bad).unwrap());
    }

    #[test]
    fn produced_candidates_satisfy_phi() {
        let rxn = ester_record();
        let t = extract_template(&rxn, 1).unwrap();
        for c in apply_template(&t, &rxn.product) {
            assert!(phi_match_reactants(&rxn.product, &t, &c.mols).unwrap());
        }
    }

    #[test]
    fn template_key_dedups_map_renumberings() {
        let a = parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]").unwrap();
        let b = parse_template_line("[C:7][O:3]>>[O:3].[C:7]Br").unwrap();
        assert_eq!(a.template_key(), b.template_key());
        let table = TemplateTable::from_templates([a, b]);
        assert_eq!(table.len(), 1);
    }

    #[test]
    fn template_line_roundtrip() {
        let rxn = ester_record();
        let t = extract_template(&rxn, 1).unwrap();
        let line = format_template_line(&t);
        let (table, report) = load_templates_str(&line);
        assert_eq!(report.parsed, 1);
        assert!(report.rejected.is_empty());
        assert_eq!(table.get(0).template_key(), t.template_key());
        assert_eq!(table.get(0).class_tag(), t.class_tag());
    }

    #[test]
    fn loader_reports_rejects() {
        let text = "not a template\n[C:1][O:2]>>[C:1]Br.[O:2]\t3\n[C:1]>>C@\t1\n";
        let (table, report) = load_templates_str(text);
        assert_eq!(table.len(), 1);
        assert_eq!(report.parsed, 1);
        assert_eq!(report.rejected.len(), 2);
    }

    #[test]
    fn symmetric_product_dedups_automorphic_results() {
        // Two automorphic embeddings of the C-O pattern in a symmetric diol
        // produce the same reactant multiset and collapse to one candidate.
        let t = parse_template_line("[C:1][O:2]>>[C:1]=[O:2]").unwrap();
        let symmetric = parse_molecule("OC(C)(C)O").unwrap();
        let candidates = apply_template(&t, &symmetric);
        assert_eq!(candidates.len(), 1);

        // Distinct sites stay distinct: a symmetric bis-ether has two ether
        // bonds on each side, four embeddings, two surviving candidates.
        let ether = parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]").unwrap();
        let candidates = apply_template(&ether, &parse_molecule("COCCOC").unwrap());
        assert_eq!(candidates.len(), 2);
    }

    #[test]
    fn dedup_bound_on_extraction() {
        let records = [ester_record()];
        let templates: Vec<_> = records
            .iter()
            .map(|r| extract_template(r, 1).unwrap())
            .collect();
        let table = TemplateTable::from_templates(templates);
        assert!(table.len() <= records.len());
    }
}
