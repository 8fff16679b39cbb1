//! Dataset ingestion, support caches, and corpus statistics.
//!
//! Reaction files are TSV rows `record_id <TAB> reactants>>product
//! [<TAB> class]`. Rows with several products are duplicated into one
//! record per product (sharing the reactant set); records with broken atom
//! maps are dropped and counted; malformed rows are collected with line
//! numbers and only become fatal past a configurable fraction.
//!
//! The cache store holds, per product, the matched-template set and the
//! candidate reactant sets each matched rule generates, persisted as
//! line-delimited text keyed to a content hash of the template table.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chem::{parse_molecule, CanonicalKey, MolGraph};
use crate::gln::{compute_support_r, ScoreError, SupportR, SupportT};
use crate::infer::SupportProvider;
use crate::template::{
    self, extract_template, format_template_line, CandidateSet, ReactionRecord, RetroTemplate,
    TemplateTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub records: Vec<ReactionRecord>,
    pub split: Split,
    pub class_labels_present: bool,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub rows: usize,
    pub loaded: usize,
    /// Extra records minted by multi-product duplication.
    pub duplicated: usize,
    /// Records dropped for atom-map violations.
    pub dropped_bad_maps: usize,
    pub malformed: Vec<(usize, String)>,
}

impl LoadReport {
    pub fn summary(&self) -> String {
        format!(
            "rows={} loaded={} duplicated={} dropped_bad_maps={} malformed={}",
            self.rows,
            self.loaded,
            self.duplicated,
            self.dropped_bad_maps,
            self.malformed.len()
        )
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{bad} of {total} rows malformed, above the tolerated fraction")]
    TooManyBadRows { bad: usize, total: usize },
    #[error("cache file malformed: {0}")]
    CacheFormat(String),
    #[error("cache was built for a different template table (hash {found}, table {expected})")]
    StaleCache { expected: String, found: String },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

pub const DEFAULT_BAD_ROW_FRACTION: f64 = 0.25;

pub fn load_reactions(path: &Path, split: Split) -> Result<(Dataset, LoadReport), DataError> {
    let text = std::fs::read_to_string(path)?;
    load_reactions_str(&text, split, DEFAULT_BAD_ROW_FRACTION)
}

pub fn load_reactions_str(
    text: &str,
    split: Split,
    max_bad_fraction: f64,
) -> Result<(Dataset, LoadReport), DataError> {
    let mut report = LoadReport::default();
    let mut records = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    let mut class_present = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        report.rows += 1;
        match parse_row(line) {
            Err(e) => report.malformed.push((lineno + 1, e)),
            Ok((id, reactant_strs, product_strs, class)) => {
                if class.is_some() {
                    class_present = true;
                }
                let multi = product_strs.len() > 1;
                let mut row_records = Vec::new();
                let mut row_err = None;
                for (k, ptext) in product_strs.iter().enumerate() {
                    let record_id = if multi { format!("{id}#{k}") } else { id.clone() };
                    if !seen_ids.insert(record_id.clone()) {
                        row_err = Some(format!("duplicate record id '{record_id}'"));
                        break;
                    }
                    let product = match parse_molecule(ptext) {
                        Ok(m) => m,
                        Err(e) => {
                            row_err = Some(format!("product: {e}"));
                            break;
                        }
                    };
                    let mut reactants = Vec::new();
                    for rtext in &reactant_strs {
                        match parse_molecule(rtext) {
                            Ok(m) => reactants.push(m),
                            Err(e) => {
                                row_err = Some(format!("reactant: {e}"));
                                break;
                            }
                        }
                    }
                    if row_err.is_some() {
                        break;
                    }
                    row_records.push(ReactionRecord {
                        record_id,
                        product,
                        reactants,
                        reaction_class: class,
                    });
                }
                if let Some(e) = row_err {
                    report.malformed.push((lineno + 1, e));
                    continue;
                }
                let mut kept_from_row = 0usize;
                for rec in row_records {
                    match rec.validate() {
                        Ok(()) => {
                            kept_from_row += 1;
                            records.push(rec);
                        }
                        Err(_) => report.dropped_bad_maps += 1,
                    }
                }
                if multi {
                    report.duplicated += kept_from_row.saturating_sub(1);
                }
            }
        }
    }
    if report.rows > 0 {
        let bad = report.malformed.len();
        if bad as f64 > max_bad_fraction * report.rows as f64 {
            return Err(DataError::TooManyBadRows {
                bad,
                total: report.rows,
            });
        }
    }
    report.loaded = records.len();
    Ok((
        Dataset {
            records,
            split,
            class_labels_present: class_present,
        },
        report,
    ))
}

type ParsedRow = (String, Vec<String>, Vec<String>, Option<u8>);

fn parse_row(line: &str) -> Result<ParsedRow, String> {
    let mut cols = line.split('\t');
    let id = cols.next().filter(|s| !s.is_empty()).ok_or("missing record id")?;
    let rxn = cols.next().ok_or("missing reaction column")?;
    let class = match cols.next() {
        None | Some("") | Some("-") => None,
        Some(c) => Some(
            c.parse::<u8>()
                .ok()
                .filter(|v| (1..=10).contains(v))
                .ok_or_else(|| format!("bad class '{c}'"))?,
        ),
    };
    if cols.next().is_some() {
        return Err("too many columns".into());
    }
    let (reactants, product) = rxn.split_once(">>").ok_or("missing '>>'")?;
    if reactants.is_empty() || product.is_empty() {
        return Err("empty reaction side".into());
    }
    Ok((
        id.to_string(),
        reactants.split('.').map(str::to_string).collect(),
        product.split('.').map(str::to_string).collect(),
        class,
    ))
}

// ---------------------------------------------------------------------------
// Cache store
// ---------------------------------------------------------------------------

/// Per-product cached supports.
#[derive(Debug, Clone, Default)]
pub struct ProductSupport {
    pub matched: Vec<usize>,
    pub candidates: BTreeMap<usize, Vec<CandidateSet>>,
    /// Table index of the rule this record realizes (training signal);
    /// None when extraction failed or the rule is not in the table.
    pub truth_template: Option<usize>,
    /// Ground-truth reactant set found among its own rule's candidates.
    pub truth_found: bool,
    /// Present when the product was excluded (support cap etc.).
    pub excluded: Option<String>,
}

#[derive(Debug)]
pub struct CacheStore {
    pub table: TemplateTable,
    pub template_hash: String,
    pub products: BTreeMap<String, ProductSupport>,
}

#[derive(Debug, Default)]
pub struct BuildReport {
    pub products: usize,
    pub excluded: usize,
    pub truth_missing: usize,
}

pub fn template_table_hash(table: &TemplateTable) -> String {
    let mut h = Sha256::new();
    for t in table.templates() {
        h.update(format_template_line(t).as_bytes());
        h.update(b"\n");
    }
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build the per-product supports for a dataset: the matched-template set,
/// the candidate reactant sets per matched rule, and the ground-truth
/// membership signal for training. Products fan out across the rayon pool;
/// the merge is ordered, so the result is byte-identical at any thread
/// count.
pub fn build_caches(
    dataset: &Dataset,
    table: &TemplateTable,
    radius: usize,
    threads: usize,
) -> Result<(CacheStore, BuildReport), DataError> {
    let run = |builder: rayon::ThreadPoolBuilder| -> Result<Vec<(String, ProductSupport)>, DataError> {
        let pool = builder.build().map_err(|e| DataError::CacheFormat(e.to_string()))?;
        Ok(pool.install(|| {
            dataset
                .records
                .par_iter()
                .map(|rec| (rec.record_id.clone(), build_product_support(rec, table, radius)))
                .collect()
        }))
    };
    let builder = if threads == 0 {
        rayon::ThreadPoolBuilder::new()
    } else {
        rayon::ThreadPoolBuilder::new().num_threads(threads)
    };
    let entries = run(builder)?;
    let mut products = BTreeMap::new();
    let mut report = BuildReport {
        products: entries.len(),
        ..BuildReport::default()
    };
    for (id, ps) in entries {
        if ps.excluded.is_some() {
            report.excluded += 1;
        }
        if !ps.truth_found {
            report.truth_missing += 1;
        }
        products.insert(id, ps);
    }
    Ok((
        CacheStore {
            table: table.clone(),
            template_hash: template_table_hash(table),
            products,
        },
        report,
    ))
}

fn build_product_support(rec: &ReactionRecord, table: &TemplateTable, radius: usize) -> ProductSupport {
    let mut ps = ProductSupport::default();
    let matched: Vec<usize> = (0..table.len())
        .filter(|&i| template::phi_match_template(&rec.product, table.get(i), table))
        .collect();
    if matched.len() > crate::gln::MAX_SUPPORT {
        ps.excluded = Some(format!("matched {} templates, above the support cap", matched.len()));
        return ps;
    }
    ps.matched = matched;
    for &i in &ps.matched {
        let candidates = template::apply_template(table.get(i), &rec.product);
        if candidates.len() > crate::gln::MAX_SUPPORT {
            ps.excluded = Some(format!(
                "template {i} generated {} candidates, above the support cap",
                candidates.len()
            ));
            ps.candidates.clear();
            return ps;
        }
        ps.candidates.insert(i, candidates);
    }
    ps.truth_template = extract_template(rec, radius)
        .ok()
        .and_then(|t| table.index_of(t.template_key()));
    let truth = rec.truth_keys();
    ps.truth_found = ps
        .truth_template
        .and_then(|ti| ps.candidates.get(&ti))
        .map_or(false, |cands| cands.iter().any(|c| c.keys == truth));
    ps
}

impl CacheStore {
    /// Re-verify both predicates on every cached pair (the `--verify` path).
    pub fn verify(&self, dataset: &Dataset) -> Result<(), DataError> {
        let by_id: BTreeMap<&str, &ReactionRecord> = dataset
            .records
            .iter()
            .map(|r| (r.record_id.as_str(), r))
            .collect();
        for (id, ps) in &self.products {
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| DataError::CacheFormat(format!("cached product {id} not in dataset")))?;
            for &ti in &ps.matched {
                if !template::phi_match_template(&rec.product, self.table.get(ti), &self.table) {
                    return Err(DataError::CacheFormat(format!(
                        "cached match {id}/{ti} fails the template predicate"
                    )));
                }
            }
            for (&ti, cands) in &ps.candidates {
                for c in cands {
                    let ok = template::phi_match_reactants(&rec.product, self.table.get(ti), &c.mols)
                        .map_err(|e| DataError::CacheFormat(e.to_string()))?;
                    if !ok {
                        return Err(DataError::CacheFormat(format!(
                            "cached candidate {id}/{ti} fails the reactant predicate"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "#retrologic-cache v1")?;
        writeln!(out, "hash {}", self.template_hash)?;
        for (id, ps) in &self.products {
            writeln!(out, "product {id}")?;
            if let Some(reason) = &ps.excluded {
                writeln!(out, "exclude {reason}")?;
            }
            for &ti in &ps.matched {
                writeln!(out, "match {ti}")?;
            }
            for (&ti, cands) in &ps.candidates {
                for c in cands {
                    let notation: Vec<String> = c.keys.iter().map(|k| k.0.clone()).collect();
                    writeln!(out, "cand {ti} {}", notation.join("."))?;
                }
            }
            match (ps.truth_template, ps.truth_found) {
                (Some(ti), found) => writeln!(out, "truth {ti} {}", if found { "ok" } else { "missing" })?,
                (None, _) => writeln!(out, "truth - missing")?,
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, table: &TemplateTable) -> Result<CacheStore, DataError> {
        let text = std::fs::read_to_string(path)?;
        let expected = template_table_hash(table);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.starts_with("#retrologic-cache") => {}
            _ => return Err(DataError::CacheFormat("missing header".into())),
        }
        let found = match lines.next() {
            Some((_, l)) if l.starts_with("hash ") => l[5..].to_string(),
            _ => return Err(DataError::CacheFormat("missing hash line".into())),
        };
        if found != expected {
            return Err(DataError::StaleCache { expected, found });
        }
        let mut products: BTreeMap<String, ProductSupport> = BTreeMap::new();
        let mut current: Option<(String, ProductSupport)> = None;
        for (lineno, line) in lines {
            let err = |msg: &str| DataError::CacheFormat(format!("line {}: {msg}", lineno + 1));
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(id) = line.strip_prefix("product ") {
                if let Some((pid, ps)) = current.take() {
                    products.insert(pid, ps);
                }
                current = Some((id.to_string(), ProductSupport::default()));
                continue;
            }
            let (_, ps) = current.as_mut().ok_or_else(|| err("entry before any product"))?;
            if let Some(rest) = line.strip_prefix("match ") {
                let ti: usize = rest.parse().map_err(|_| err("bad match index"))?;
                if ti >= table.len() {
                    return Err(err("match index out of range"));
                }
                ps.matched.push(ti);
            } else if let Some(rest) = line.strip_prefix("cand ") {
                let (ti, notation) = rest.split_once(' ').ok_or_else(|| err("bad cand line"))?;
                let ti: usize = ti.parse().map_err(|_| err("bad cand index"))?;
                if ti >= table.len() {
                    return Err(err("cand index out of range"));
                }
                let mut mols = Vec::new();
                for part in notation.split('.') {
                    mols.push(
                        parse_molecule(part)
                            .map_err(|e| err(&format!("cand molecule: {e}")))?,
                    );
                }
                let keys: Vec<CanonicalKey> =
                    notation.split('.').map(|s| CanonicalKey(s.to_string())).collect();
                ps.candidates
                    .entry(ti)
                    .or_default()
                    .push(CandidateSet { mols, keys });
            } else if let Some(rest) = line.strip_prefix("truth ") {
                let (ti, state) = rest.split_once(' ').ok_or_else(|| err("bad truth line"))?;
                ps.truth_template = match ti {
                    "-" => None,
                    v => Some(v.parse().map_err(|_| err("bad truth index"))?),
                };
                ps.truth_found = state == "ok";
            } else if let Some(reason) = line.strip_prefix("exclude ") {
                ps.excluded = Some(reason.to_string());
            } else {
                return Err(err("unknown directive"));
            }
        }
        if let Some((pid, ps)) = current.take() {
            products.insert(pid, ps);
        }
        Ok(CacheStore {
            table: table.clone(),
            template_hash: found,
            products,
        })
    }
}

impl SupportProvider for CacheStore {
    fn support_t(
        &self,
        product_id: &str,
        product: &MolGraph,
        table: &TemplateTable,
    ) -> Result<SupportT, ScoreError> {
        match self.products.get(product_id) {
            Some(ps) if ps.excluded.is_none() => SupportT::build(product_id, table, &ps.matched),
            // Unknown or excluded products fall back to direct computation.
            _ => crate::gln::compute_support_t(product_id, product, table),
        }
    }

    fn support_r(
        &self,
        product_id: &str,
        product: &MolGraph,
        t: &RetroTemplate,
    ) -> Result<SupportR, ScoreError> {
        let cached = self.products.get(product_id).and_then(|ps| {
            self.table
                .index_of(t.template_key())
                .and_then(|ti| ps.candidates.get(&ti))
        });
        match cached {
            Some(cands) => Ok(SupportR {
                product_id: product_id.to_string(),
                template_key: t.template_key().to_string(),
                candidates: cands.clone(),
            }),
            None => compute_support_r(product_id, product, t),
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct StatsReport {
    pub records: usize,
    pub templates: usize,
    pub unique_centers: usize,
    /// Fraction of records whose truth appears among their own cached
    /// candidates, under any matched rule.
    pub coverage: f64,
    pub mean_centers_per_product: f64,
    pub mean_templates_per_product: f64,
    pub mean_reactants: f64,
    pub empty: bool,
}

impl std::fmt::Display for StatsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.empty {
            return writeln!(f, "empty corpus");
        }
        writeln!(f, "records:                  {}", self.records)?;
        writeln!(f, "rules:                    {}", self.templates)?;
        writeln!(f, "unique centers:           {}", self.unique_centers)?;
        writeln!(f, "rule coverage:            {:.1}%", self.coverage * 100.0)?;
        writeln!(f, "avg. centers per mol:     {:.2}", self.mean_centers_per_product)?;
        writeln!(f, "avg. rules per mol:       {:.2}", self.mean_templates_per_product)?;
        writeln!(f, "avg. reactants:           {:.2}", self.mean_reactants)
    }
}

pub fn corpus_stats(dataset: &Dataset, caches: &CacheStore) -> StatsReport {
    if dataset.records.is_empty() {
        return StatsReport {
            records: 0,
            templates: caches.table.len(),
            unique_centers: count_unique_centers(&caches.table),
            coverage: 0.0,
            mean_centers_per_product: 0.0,
            mean_templates_per_product: 0.0,
            mean_reactants: 0.0,
            empty: true,
        };
    }
    let mut covered = 0usize;
    let mut center_sum = 0usize;
    let mut template_sum = 0usize;
    let mut reactant_sum = 0usize;
    for rec in &dataset.records {
        reactant_sum += rec.reactants.len();
        let ps = caches.products.get(&rec.record_id);
        let truth = rec.truth_keys();
        if let Some(ps) = ps {
            template_sum += ps.matched.len();
            let centers: std::collections::HashSet<&str> = ps
                .matched
                .iter()
                .map(|&i| caches.table.get(i).center_key())
                .collect();
            center_sum += centers.len();
            if ps
                .candidates
                .values()
                .any(|cands| cands.iter().any(|c| c.keys == truth))
            {
                covered += 1;
            }
        }
    }
    let n = dataset.records.len() as f64;
    StatsReport {
        records: dataset.records.len(),
        templates: caches.table.len(),
        unique_centers: count_unique_centers(&caches.table),
        coverage: covered as f64 / n,
        mean_centers_per_product: center_sum as f64 / n,
        mean_templates_per_product: template_sum as f64 / n,
        mean_reactants: reactant_sum as f64 / n,
        empty: false,
    }
}

fn count_unique_centers(table: &TemplateTable) -> usize {
    table
        .templates()
        .iter()
        .map(|t| t.center_key())
        .collect::<std::collections::HashSet<_>>()
        .len()
}

/// Extract templates from every record, reporting per-record failures.
pub fn extract_corpus_templates(
    dataset: &Dataset,
    radius: usize,
) -> (TemplateTable, Vec<(String, String)>) {
    let mut failures = Vec::new();
    let mut templates = Vec::new();
    for rec in &dataset.records {
        match extract_template(rec, radius) {
            Ok(t) => templates.push(t),
            Err(e) => failures.push((rec.record_id.clone(), e.to_string())),
        }
    }
    (TemplateTable::from_templates(templates), failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
r1\t[CH3:1][C:2](=[O:3])[O:4].[O:9][CH3:8]>>[CH3:1][C:2](=[O:3])[O:4][CH3:8]\t1
r2\t[C:1]Br.[N:2][C:3]>>[C:1][N:2][C:3]\t2
r3\t[C:1]Br.[O:2][C:3]>>[C:1][O:2][C:3]\t1
";

    #[test]
    fn loads_three_rows() {
        let (ds, report) = load_reactions_str(TOY, Split::Train, 0.25).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert_eq!(report.loaded, 3);
        assert!(report.malformed.is_empty());
        assert!(ds.class_labels_present);
    }

    #[test]
    fn multi_product_rows_duplicate() {
        let text = "r1\t[C:1][O:2].[C:3][N:4]>>[C:1][O:2].[C:3][N:4]\t-\n";
        let (ds, report) = load_reactions_str(text, Split::Train, 0.25).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.records[0].record_id, "r1#0");
        assert_eq!(ds.records[1].record_id, "r1#1");
        assert_eq!(ds.records[0].reactants.len(), 2);
        assert_eq!(ds.records[1].reactants.len(), 2);
        assert_eq!(report.duplicated, 1);
    }

    #[test]
    fn unmapped_product_rows_are_dropped_and_counted() {
        let text = "r1\t[C:1]O>>[C:1]O\nr2\tCO>>CO\n";
        let (ds, report) = load_reactions_str(text, Split::Train, 0.9).unwrap();
        // r1 product O atom unmapped; r2 fully unmapped.
        assert_eq!(ds.records.len(), 0);
        assert_eq!(report.dropped_bad_maps, 2);
    }

    #[test]
    fn malformed_rows_fail_past_threshold() {
        let text = "r1\tgarbage\nr2\tmore garbage\nr3\t[C:1]Br.[O:2]>>[C:1][O:2]\n";
        let err = load_reactions_str(text, Split::Train, 0.25).unwrap_err();
        assert!(matches!(err, DataError::TooManyBadRows { bad: 2, total: 3 }));
        let (ds, report) = load_reactions_str(text, Split::Train, 0.9).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(report.malformed.len(), 2);
        assert_eq!(report.malformed[0].0, 1);
    }

    #[test]
    fn ingestion_is_idempotent() {
        let a = load_reactions_str(TOY, Split::Val, 0.25).unwrap().0;
        let b = load_reactions_str(TOY, Split::Val, 0.25).unwrap().0;
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.record_id, y.record_id);
            assert_eq!(x.truth_keys(), y.truth_keys());
            assert_eq!(x.reaction_class, y.reaction_class);
        }
    }

    fn toy_setup() -> (Dataset, TemplateTable) {
        let (ds, _) = load_reactions_str(TOY, Split::Train, 0.25).unwrap();
        let (table, failures) = extract_corpus_templates(&ds, 1);
        assert!(failures.is_empty(), "{failures:?}");
        (ds, table)
    }

    #[test]
    fn caches_find_ground_truth_and_roundtrip() {
        let (ds, table) = toy_setup();
        let (store, report) = build_caches(&ds, &table, 1, 1).unwrap();
        assert_eq!(report.products, 3);
        assert_eq!(report.truth_missing, 0, "every record's truth in its own cache");
        assert_eq!(report.excluded, 0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caches.txt");
        store.save(&path).unwrap();
        let loaded = CacheStore::load(&path, &table).unwrap();
        assert_eq!(loaded.products.len(), store.products.len());
        for (id, ps) in &store.products {
            let lp = &loaded.products[id];
            assert_eq!(lp.matched, ps.matched);
            assert_eq!(lp.truth_template, ps.truth_template);
            assert_eq!(lp.truth_found, ps.truth_found);
            for (ti, cands) in &ps.candidates {
                let lc = &lp.candidates[ti];
                assert_eq!(lc.len(), cands.len());
                for (a, b) in lc.iter().zip(cands) {
                    assert_eq!(a.keys, b.keys);
                }
            }
        }
        // Byte-identical rebuild.
        let path2 = dir.path().join("caches2.txt");
        let (store2, _) = build_caches(&ds, &table, 1, 2).unwrap();
        store2.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap(),
            "thread count must not change cache bytes"
        );
        store.verify(&ds).unwrap();
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (ds, table) = toy_setup();
        let (store, _) = build_caches(&ds, &table, 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caches.txt");
        store.save(&path).unwrap();
        let other = TemplateTable::from_templates([template::parse_template_line(
            "[C:1][O:2]>>[C:1]Br.[O:2]",
        )
        .unwrap()]);
        assert!(matches!(
            CacheStore::load(&path, &other),
            Err(DataError::StaleCache { .. })
        ));
    }

    #[test]
    fn empty_template_table_gives_empty_supports() {
        let (ds, _) = toy_setup();
        let empty = TemplateTable::default();
        let (store, report) = build_caches(&ds, &empty, 1, 1).unwrap();
        assert_eq!(report.truth_missing, ds.records.len());
        assert!(store.products.values().all(|p| p.matched.is_empty()));
    }

    #[test]
    fn stats_match_brute_force() {
        let (ds, table) = toy_setup();
        let (store, _) = build_caches(&ds, &table, 1, 1).unwrap();
        let stats = corpus_stats(&ds, &store);
        assert!(!stats.empty);
        assert_eq!(stats.records, 3);
        // Brute-force coverage: apply every rule to every product.
        let mut covered = 0;
        for rec in &ds.records {
            let truth = rec.truth_keys();
            let hit = (0..table.len()).any(|i| {
                template::apply_template(table.get(i), &rec.product)
                    .iter()
                    .any(|c| c.keys == truth)
            });
            if hit {
                covered += 1;
            }
        }
        assert!((stats.coverage - covered as f64 / 3.0).abs() < 1e-12);
        // All-2-reactant corpus.
        assert!((stats.mean_reactants - 2.0).abs() < 1e-12);
        // Empty corpus: zeroed with flag.
        let empty_ds = Dataset {
            records: vec![],
            split: Split::Test,
            class_labels_present: false,
        };
        let stats = corpus_stats(&empty_ds, &store);
        assert!(stats.empty);
        assert_eq!(stats.records, 0);
    }
}
