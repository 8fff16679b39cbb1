//! Prediction and evaluation: three-stage beam search over the restricted
//! supports, top-k exact-match scoring, and per-atom center attribution.
//!
//! Beam stages: (1) keep the `k` best reaction centers by `v1`; (2) keep
//! the `k` best (center, rule) pairs by `v1 + v2`; (3) rank every reactant
//! set the kept rules generate by the total score `v1 + v2 + w2`. Duplicate
//! reactant sets across rules keep their single best score by default.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::chem::{key_multiset, write_molecule, CanonicalKey, MolGraph};
use crate::gln::{
    compute_support_r, compute_support_t, Energy, GlnModel, ScoreError, SupportR, SupportT, G1, G2,
};
use crate::template::{ReactionRecord, RetroTemplate, TemplateTable};

/// Source of supports: direct computation, or the persisted caches in the
/// data layer (which implements this trait).
pub trait SupportProvider {
    fn support_t(
        &self,
        product_id: &str,
        product: &MolGraph,
        table: &TemplateTable,
    ) -> Result<SupportT, ScoreError>;

    fn support_r(
        &self,
        product_id: &str,
        product: &MolGraph,
        t: &RetroTemplate,
    ) -> Result<SupportR, ScoreError>;
}

/// Computes supports on the fly; fine for single predictions, wasteful in
/// loops (use the cache store there).
pub struct OnTheFly;

impl SupportProvider for OnTheFly {
    fn support_t(
        &self,
        product_id: &str,
        product: &MolGraph,
        table: &TemplateTable,
    ) -> Result<SupportT, ScoreError> {
        compute_support_t(product_id, product, table)
    }

    fn support_r(
        &self,
        product_id: &str,
        product: &MolGraph,
        t: &RetroTemplate,
    ) -> Result<SupportR, ScoreError> {
        compute_support_r(product_id, product, t)
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub rank: usize,
    /// Ranking score: the joint log-probability `log p(T|O) + log p(R|T,O)`
    /// over the product's supports, non-increasing with rank. The raw total
    /// `w1 + w2` only orders candidates within one rule; across rules the
    /// trained objective constrains the normalized form, so that is what
    /// final ranking uses.
    pub score: f64,
    pub template_key: String,
    pub center_key: String,
    pub reactant_keys: Vec<CanonicalKey>,
    pub reactants: Vec<MolGraph>,
}

#[derive(Debug, Clone, Copy)]
pub struct BeamOptions {
    pub beam: usize,
    pub class: Option<u8>,
    /// Keep only the best-scoring copy of a reactant set that several rules
    /// generate. Switchable because the alternative (count每 rule) is a
    /// defensible reading of top-k counting.
    pub dedup_across_templates: bool,
}

impl BeamOptions {
    pub fn with_beam(beam: usize) -> BeamOptions {
        BeamOptions {
            beam,
            class: None,
            dedup_across_templates: true,
        }
    }
}

/// Stage 1: v1 per center group, plus the top-k group indices (ties broken
/// by center key). The full score vector stays around because the final
/// ranking normalizes over every center.
fn stage1_centers(
    model: &GlnModel,
    product: &MolGraph,
    support: &SupportT,
    k: usize,
) -> Result<(Vec<f64>, Vec<usize>), ScoreError> {
    let gp = model.embed_with(G2, &model.featurize_mol(product))?;
    let mut v1 = Vec::with_capacity(support.groups.len());
    for g in &support.groups {
        let go = model.embed_with(G1, &model.featurize_pat(&g.center))?;
        v1.push(model.pair_score(Energy::V1, &go, &gp));
    }
    let mut order: Vec<usize> = (0..support.groups.len()).collect();
    order.sort_by(|&a, &b| {
        v1[b].total_cmp(&v1[a])
            .then_with(|| support.groups[a].center_key.cmp(&support.groups[b].center_key))
    });
    order.truncate(k);
    Ok((v1, order))
}

/// Stage 2: v2 for every rule of the kept centers; keeps the top-k
/// (center, rule) pairs by the raw `v1 + v2` and returns each kept
/// center's full v2 log-normalizer.
#[allow(clippy::type_complexity)]
fn stage2_templates(
    model: &GlnModel,
    product: &MolGraph,
    support: &SupportT,
    table: &TemplateTable,
    v1: &[f64],
    kept_centers: &[usize],
    k: usize,
) -> Result<(Vec<(usize, usize, f64)>, std::collections::HashMap<usize, f64>), ScoreError> {
    let g3o = model.embed_with(crate::gln::G3, &model.featurize_mol(product))?;
    let mut scored: Vec<(usize, usize, f64)> = Vec::new();
    let mut group_lse = std::collections::HashMap::new();
    for &gi in kept_centers {
        let group = &support.groups[gi];
        let mut v2s = Vec::with_capacity(group.members.len());
        for &idx in &group.members {
            let mean = mean_pattern_embedding(model, table.get(idx))?;
            let v2 = model.pair_score(Energy::V2, &g3o, &mean);
            v2s.push(v2);
            scored.push((gi, idx, v2));
        }
        group_lse.insert(gi, crate::gln::log_sum_exp(&v2s));
    }
    scored.sort_by(|a, b| {
        let (sa, sb) = (v1[a.0] + a.2, v1[b.0] + b.2);
        sb.total_cmp(&sa)
            .then_with(|| table.get(a.1).template_key().cmp(table.get(b.1).template_key()))
    });
    scored.truncate(k);
    Ok((scored, group_lse))
}

fn mean_pattern_embedding(
    model: &GlnModel,
    t: &RetroTemplate,
) -> Result<ndarray::Array1<f64>, ScoreError> {
    let mut sum = ndarray::Array1::zeros(model.dim());
    for r in t.reactant_patterns() {
        sum += &model.embed_with(crate::gln::G4, &model.featurize_pat(r))?;
    }
    Ok(sum / t.reactant_patterns().len() as f64)
}

/// Beam-search prediction. Returns at most `beam` predictions, best first;
/// an empty list when no template matches (a valid outcome: extracted rules
/// never cover every molecule).
pub fn beam_search(
    model: &GlnModel,
    table: &TemplateTable,
    provider: &dyn SupportProvider,
    product_id: &str,
    product: &MolGraph,
    opts: &BeamOptions,
) -> Result<Vec<Prediction>, ScoreError> {
    assert!(opts.beam > 0, "beam size must be positive");
    let support = provider.support_t(product_id, product, table)?;
    let support = match opts.class {
        None => support,
        Some(c) => match support.restrict_by_class(c, table) {
            Ok(s) => s,
            Err(ScoreError::EmptySupport) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        },
    };
    if support.is_empty() {
        return Ok(Vec::new());
    }
    let (v1, kept_centers) = stage1_centers(model, product, &support, opts.beam)?;
    let lse_centers = crate::gln::log_sum_exp(&v1);
    let (kept_templates, group_lse) =
        stage2_templates(model, product, &support, table, &v1, &kept_centers, opts.beam)?;

    let g5o = model.embed_with(crate::gln::G5, &model.featurize_mol(product))?;
    struct Entry {
        score: f64,
        template_key: String,
        center_key: String,
        mols: Vec<MolGraph>,
    }
    let mut by_keys: BTreeMap<Vec<CanonicalKey>, Entry> = BTreeMap::new();
    let mut flat: Vec<(Vec<CanonicalKey>, Entry)> = Vec::new();
    for &(gi, idx, v2) in &kept_templates {
        let t = table.get(idx);
        let sr = provider.support_r(product_id, product, t)?;
        if sr.candidates.is_empty() {
            continue;
        }
        let mut w2s = Vec::with_capacity(sr.candidates.len());
        let mut means = Vec::with_capacity(sr.candidates.len());
        for cand in &sr.candidates {
            let mut sum = ndarray::Array1::zeros(model.dim());
            for m in &cand.mols {
                sum += &model.embed_with(crate::gln::G6, &model.featurize_mol(m))?;
            }
            let mean = sum / cand.mols.len() as f64;
            w2s.push(model.pair_score(Energy::W2, &g5o, &mean));
            means.push(mean);
        }
        let lse_w2 = crate::gln::log_sum_exp(&w2s);
        let log_p_template = (v1[gi] - lse_centers) + (v2 - group_lse[&gi]);
        for (cand, &w2) in sr.candidates.iter().zip(&w2s) {
            let entry = Entry {
                score: log_p_template + (w2 - lse_w2),
                template_key: t.template_key().to_string(),
                center_key: support.groups[gi].center_key.clone(),
                mols: cand.mols.clone(),
            };
            if opts.dedup_across_templates {
                match by_keys.get_mut(&cand.keys) {
                    Some(existing)
                        if existing.score > entry.score
                            || (existing.score == entry.score
                                && existing.template_key <= entry.template_key) => {}
                    Some(existing) => *existing = entry,
                    None => {
                        by_keys.insert(cand.keys.clone(), entry);
                    }
                }
            } else {
                flat.push((cand.keys.clone(), entry));
            }
        }
    }
    let mut entries: Vec<(Vec<CanonicalKey>, Entry)> = if opts.dedup_across_templates {
        by_keys.into_iter().collect()
    } else {
        flat
    };
    entries.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then_with(|| a.1.template_key.cmp(&b.1.template_key))
            .then_with(|| a.0.cmp(&b.0))
    });
    entries.truncate(opts.beam);
    Ok(entries
        .into_iter()
        .enumerate()
        .map(|(i, (keys, e))| Prediction {
            rank: i + 1,
            score: e.score,
            template_key: e.template_key,
            center_key: e.center_key,
            reactant_keys: keys,
            reactants: e.mols,
        })
        .collect())
}

/// Exhaustive argmax of the total score over every (template, candidate)
/// pair, with the same tie-breaking as the beam. The oracle the beam must
/// reproduce once its width covers the support.
pub fn exhaustive_best(
    model: &GlnModel,
    table: &TemplateTable,
    provider: &dyn SupportProvider,
    product_id: &str,
    product: &MolGraph,
) -> Result<Option<Prediction>, ScoreError> {
    let support = provider.support_t(product_id, product, table)?;
    if support.is_empty() {
        return Ok(None);
    }
    let beam = support.n_templates().max(1) * (crate::gln::MAX_SUPPORT / 10).max(1);
    let preds = beam_search(
        model,
        table,
        provider,
        product_id,
        product,
        &BeamOptions::with_beam(beam),
    )?;
    Ok(preds.into_iter().next())
}

/// Multiset equality of canonical keys.
pub fn exact_match(prediction: &[MolGraph], truth: &[MolGraph]) -> bool {
    key_multiset(prediction) == key_multiset(truth)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub beam: usize,
    /// (k, accuracy@k), ascending in k; accuracy is non-decreasing.
    pub accuracy: Vec<(usize, f64)>,
    /// Per reaction class, same layout.
    pub per_class: BTreeMap<u8, Vec<(usize, f64)>>,
    /// Fraction of records whose truth is generated by at least one matched
    /// rule (the template-coverage ceiling of any ranking).
    pub coverage: f64,
    pub empty: bool,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.empty {
            return writeln!(f, "no records (empty evaluation)");
        }
        writeln!(f, "records: {}  beam: {}", self.n_records, self.beam)?;
        writeln!(f, "coverage: {:.4}", self.coverage)?;
        write!(f, "top-k accuracy:")?;
        for (k, acc) in &self.accuracy {
            write!(f, "  @{k}: {acc:.4}")?;
        }
        writeln!(f)?;
        for (class, accs) in &self.per_class {
            write!(f, "class {class}:")?;
            for (k, acc) in accs {
                write!(f, "  @{k}: {acc:.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Top-k exact-match evaluation over a record list. `class_conditional`
/// restricts each record's support to its own reaction class before the
/// beam runs.
pub fn evaluate(
    model: &GlnModel,
    table: &TemplateTable,
    provider: &dyn SupportProvider,
    records: &[ReactionRecord],
    ks: &[usize],
    beam: usize,
    class_conditional: bool,
) -> Result<EvalReport, ScoreError> {
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if records.is_empty() {
        return Ok(EvalReport {
            n_records: 0,
            beam,
            accuracy: ks.into_iter().map(|k| (k, 0.0)).collect(),
            per_class: BTreeMap::new(),
            coverage: 0.0,
            empty: true,
        });
    }
    let mut hits_at = vec![0usize; ks.len()];
    let mut per_class_hits: BTreeMap<u8, (usize, Vec<usize>)> = BTreeMap::new();
    let mut covered = 0usize;
    for rec in records {
        let truth = rec.truth_keys();
        let opts = BeamOptions {
            beam,
            class: if class_conditional { rec.reaction_class } else { None },
            dedup_across_templates: true,
        };
        let preds = beam_search(model, table, provider, &rec.record_id, &rec.product, &opts)?;
        let hit_rank = preds
            .iter()
            .find(|p| p.reactant_keys == truth)
            .map(|p| p.rank);
        if record_covered(table, provider, rec, &truth)? {
            covered += 1;
        }
        let class_entry = rec.reaction_class.map(|c| {
            per_class_hits
                .entry(c)
                .or_insert_with(|| (0, vec![0; ks.len()]))
        });
        if let Some(e) = class_entry {
            e.0 += 1;
        }
        for (i, &k) in ks.iter().enumerate() {
            if hit_rank.map_or(false, |r| r <= k) {
                hits_at[i] += 1;
                if let Some(c) = rec.reaction_class {
                    per_class_hits.get_mut(&c).expect("inserted").1[i] += 1;
                }
            }
        }
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        n_records: records.len(),
        beam,
        accuracy: ks
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, hits_at[i] as f64 / n))
            .collect(),
        per_class: per_class_hits
            .into_iter()
            .map(|(c, (count, hits))| {
                (
                    c,
                    ks.iter()
                        .enumerate()
                        .map(|(i, &k)| (k, hits[i] as f64 / count as f64))
                        .collect(),
                )
            })
            .collect(),
        coverage: covered as f64 / n,
        empty: false,
    })
}

fn record_covered(
    table: &TemplateTable,
    provider: &dyn SupportProvider,
    rec: &ReactionRecord,
    truth: &[CanonicalKey],
) -> Result<bool, ScoreError> {
    let support = provider.support_t(&rec.record_id, &rec.product, table)?;
    for idx in support.template_indices() {
        let sr = provider.support_r(&rec.record_id, &rec.product, table.get(idx))?;
        if sr.find(truth).is_some() {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Expected top-1 accuracy of drawing a matched rule uniformly and then one
/// of its candidates uniformly: the no-learning reference the model must
/// beat. Computed analytically, no sampling noise.
pub fn uniform_baseline_top1(
    table: &TemplateTable,
    provider: &dyn SupportProvider,
    records: &[ReactionRecord],
) -> Result<f64, ScoreError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for rec in records {
        let truth = rec.truth_keys();
        let support = provider.support_t(&rec.record_id, &rec.product, table)?;
        let n_t = support.n_templates();
        if n_t == 0 {
            continue;
        }
        let mut p = 0.0;
        for idx in support.template_indices() {
            let sr = provider.support_r(&rec.record_id, &rec.product, table.get(idx))?;
            if !sr.candidates.is_empty() && sr.find(&truth).is_some() {
                p += 1.0 / (n_t as f64 * sr.candidates.len() as f64);
            }
        }
        total += p;
    }
    Ok(total / records.len() as f64)
}

/// Per-atom contribution of a center pattern's affinity: `h_v . g1(center)`
/// scaled by the atom count, summing exactly to `v1`. Needs mean pooling on
/// the product embedder (the identity does not hold otherwise).
pub fn atom_scores(
    model: &GlnModel,
    product: &MolGraph,
    center: &crate::pattern::PatternGraph,
) -> Result<Vec<f64>, ScoreError> {
    if model.embedders[G2].config.pooling != crate::embed::Pooling::Mean {
        return Err(ScoreError::RequiresMeanPooling);
    }
    let go = model.embed_with(G1, &model.featurize_pat(center))?;
    let left = match &model.bilinear {
        None => go,
        Some(bs) => bs[0].t().dot(&go),
    };
    let fg = model.featurize_mol(product);
    let nodes = crate::embed::embed(&model.embedders[G2], &fg)
        .map_err(ScoreError::from)?
        .node_embeddings;
    let n = nodes.len() as f64;
    Ok(nodes.iter().map(|h| h.dot(&left) / n).collect())
}

pub fn format_prediction_line(record_id: &str, p: &Prediction) -> String {
    let notation: Vec<String> = {
        let mut mols: Vec<&MolGraph> = p.reactants.iter().collect();
        mols.sort_by_key(|m| write_molecule(m));
        mols.iter().map(|m| write_molecule(m)).collect()
    };
    format!(
        "{record_id}\t{}\t{:.6}\t{}\t{}",
        p.rank,
        p.score,
        p.template_key,
        notation.join(".")
    )
}

pub fn format_atom_score_line(record_id: &str, atom_index: usize, element: &str, score: f64) -> String {
    format!("{record_id}\t{atom_index}\t{element}\t{score:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::parse_molecule;
    use crate::embed::EmbedConfig;
    use crate::gln::ModelConfig;
    use crate::template::parse_template_line;

    fn small_model(seed: u64) -> GlnModel {
        let config = ModelConfig {
            embed: EmbedConfig {
                dim: 5,
                layers: 2,
                ..EmbedConfig::default()
            },
            ..ModelConfig::default()
        };
        GlnModel::init(&config, seed)
    }

    fn toy_table() -> TemplateTable {
        TemplateTable::from_templates([
            parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]\t1").unwrap(),
            parse_template_line("[C:1][O:2]>>[C:1]I.[O:2]\t2").unwrap(),
            parse_template_line("[C:1][N:2]>>[C:1]Br.[N:2]\t1").unwrap(),
        ])
    }

    #[test]
    fn single_rule_single_candidate_ranks_first() {
        let model = small_model(1);
        let table = TemplateTable::from_templates([
            parse_template_line("[C:1][N:2]>>[C:1]Br.[N:2]").unwrap()
        ]);
        let product = parse_molecule("CCN").unwrap();
        let preds = beam_search(
            &model, &table, &OnTheFly, "p", &product, &BeamOptions::with_beam(10),
        )
        .unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].rank, 1);
    }

    #[test]
    fn no_matching_rule_means_empty_predictions() {
        let model = small_model(2);
        let table = toy_table();
        let product = parse_molecule("CC").unwrap();
        let preds = beam_search(
            &model, &table, &OnTheFly, "p", &product, &BeamOptions::with_beam(5),
        )
        .unwrap();
        assert!(preds.is_empty());
    }

    #[test]
    fn wide_beam_equals_exhaustive_argmax() {
        let table = toy_table();
        for seed in 0..6 {
            let model = small_model(seed);
            for smiles in ["CN(C)COC", "COCCOC", "CCN", "COC(C)CN"] {
                let product = parse_molecule(smiles).unwrap();
                let preds = beam_search(
                    &model, &table, &OnTheFly, "p", &product, &BeamOptions::with_beam(1000),
                )
                .unwrap();
                let best = exhaustive_best(&model, &table, &OnTheFly, "p", &product).unwrap();
                match (preds.first(), best) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        assert_eq!(a.reactant_keys, b.reactant_keys);
                        assert!((a.score - b.score).abs() < 1e-12);
                    }
                    other => panic!("beam/exhaustive disagree: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn ranks_contiguous_scores_non_increasing() {
        let model = small_model(3);
        let table = toy_table();
        let product = parse_molecule("CN(C)COC").unwrap();
        let preds = beam_search(
            &model, &table, &OnTheFly, "p", &product, &BeamOptions::with_beam(50),
        )
        .unwrap();
        assert!(!preds.is_empty());
        for (i, p) in preds.iter().enumerate() {
            assert_eq!(p.rank, i + 1);
            if i > 0 {
                assert!(preds[i - 1].score >= p.score);
            }
        }
        // Determinism.
        let again = beam_search(
            &model, &table, &OnTheFly, "p", &product, &BeamOptions::with_beam(50),
        )
        .unwrap();
        let keys: Vec<_> = preds.iter().map(|p| p.reactant_keys.clone()).collect();
        let keys2: Vec<_> = again.iter().map(|p| p.reactant_keys.clone()).collect();
        assert_eq!(keys, keys2);
    }

    #[test]
    fn exact_match_is_order_and_numbering_invariant() {
        let a = vec![
            parse_molecule("CC(=O)O").unwrap(),
            parse_molecule("CO").unwrap(),
        ];
        let b = vec![
            parse_molecule("OC").unwrap(),
            parse_molecule("C(C)(=O)O").unwrap(),
        ];
        assert!(exact_match(&a, &b));
        assert!(!exact_match(&a, &b[..1]));
        let c = vec![
            parse_molecule("CC(=O)O").unwrap(),
            parse_molecule("CN").unwrap(),
        ];
        assert!(!exact_match(&a, &c));
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        // Self-evaluation: records whose truth is the only candidate of the
        // only matching rule must score 100% at every k.
        let model = small_model(4);
        let table = TemplateTable::from_templates([
            parse_template_line("[C:1][N:2]>>[C:1]Br.[N:2]\t1").unwrap()
        ]);
        let product = parse_molecule("CCN").unwrap();
        let truth = crate::template::apply_template(table.get(0), &product);
        let rec = ReactionRecord {
            record_id: "r0".into(),
            product,
            reactants: truth[0].mols.clone(),
            reaction_class: Some(1),
        };
        let report = evaluate(&model, &table, &OnTheFly, &[rec], &[1, 3, 5], 10, false).unwrap();
        for (_, acc) in &report.accuracy {
            assert_eq!(*acc, 1.0);
        }
        assert_eq!(report.coverage, 1.0);
        assert_eq!(report.per_class.len(), 1);
    }

    #[test]
    fn zero_coverage_corpus_scores_zero() {
        let model = small_model(5);
        let table = toy_table();
        let rec = ReactionRecord {
            record_id: "r0".into(),
            product: parse_molecule("CC").unwrap(),
            reactants: vec![parse_molecule("CCBr").unwrap()],
            reaction_class: None,
        };
        let report = evaluate(&model, &table, &OnTheFly, &[rec], &[1, 5], 10, false).unwrap();
        for (_, acc) in &report.accuracy {
            assert_eq!(*acc, 0.0);
        }
        assert_eq!(report.coverage, 0.0);
        // Empty corpus flags itself.
        let empty = evaluate(&model, &table, &OnTheFly, &[], &[1], 10, false).unwrap();
        assert!(empty.empty);
    }

    #[test]
    fn accuracy_non_decreasing_in_k() {
        let model = small_model(6);
        let table = toy_table();
        let product = parse_molecule("CN(C)COC").unwrap();
        let truth = crate::template::apply_template(table.get(0), &product);
        let rec = ReactionRecord {
            record_id: "r0".into(),
            product,
            reactants: truth.last().unwrap().mols.clone(),
            reaction_class: Some(2),
        };
        let report =
            evaluate(&model, &table, &OnTheFly, &[rec], &[1, 2, 3, 5, 10], 10, false).unwrap();
        for w in report.accuracy.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn class_conditional_filters_before_stage_one() {
        let model = small_model(7);
        let table = toy_table();
        let product = parse_molecule("COC").unwrap();
        let all = beam_search(
            &model, &table, &OnTheFly, "p", &product, &BeamOptions::with_beam(50),
        )
        .unwrap();
        let only2 = beam_search(
            &model,
            &table,
            &OnTheFly,
            "p",
            &product,
            &BeamOptions {
                beam: 50,
                class: Some(2),
                dedup_across_templates: true,
            },
        )
        .unwrap();
        assert!(only2.len() < all.len() || all.is_empty());
        for p in &only2 {
            assert_eq!(table.get(table.index_of(&p.template_key).unwrap()).class_tag(), Some(2));
        }
        // No rule of class 9 matches: empty, not an error.
        let none = beam_search(
            &model,
            &table,
            &OnTheFly,
            "p",
            &product,
            &BeamOptions {
                beam: 50,
                class: Some(9),
                dedup_across_templates: true,
            },
        )
        .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn stage2_candidates_grow_with_beam() {
        let model = small_model(8);
        let table = toy_table();
        let product = parse_molecule("CN(C)COC").unwrap();
        let st = compute_support_t("p", &product, &table).unwrap();
        for k in 1..=3usize {
            let (v1, kept_k) = stage1_centers(&model, &product, &st, k).unwrap();
            let (_, kept_k1) = stage1_centers(&model, &product, &st, k + 1).unwrap();
            let set_k: std::collections::HashSet<usize> = kept_k.iter().copied().collect();
            let set_k1: std::collections::HashSet<usize> = kept_k1.iter().copied().collect();
            assert!(set_k.is_subset(&set_k1));
            let pairs_k: std::collections::HashSet<usize> =
                stage2_templates(&model, &product, &st, &table, &v1, &kept_k, k)
                    .unwrap()
                    .0
                    .iter()
                    .map(|x| x.1)
                    .collect();
            let pairs_k1: std::collections::HashSet<usize> =
                stage2_templates(&model, &product, &st, &table, &v1, &kept_k1, k + 1)
                    .unwrap()
                    .0
                    .iter()
                    .map(|x| x.1)
                    .collect();
            assert!(pairs_k.is_subset(&pairs_k1));
        }
    }

    #[test]
    fn atom_scores_sum_to_v1() {
        let model = small_model(9);
        let product = parse_molecule("CC(=O)OC").unwrap();
        let center = crate::pattern::parse_pattern("C=O").unwrap();
        let scores = atom_scores(&model, &product, &center).unwrap();
        assert_eq!(scores.len(), product.n_atoms());
        let v1 = model.v1(&center, &product).unwrap();
        let total: f64 = scores.iter().sum();
        assert!((total - v1).abs() < 1e-9);

        // Zero parameters give all-zero scores.
        let zero = GlnModel::zeros(&model.config());
        let scores = atom_scores(&zero, &product, &center).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));

        // Non-mean pooling is rejected.
        let mut bad = model.clone();
        for e in &mut bad.embedders {
            e.config.pooling = crate::embed::Pooling::Sum;
        }
        assert!(matches!(
            atom_scores(&bad, &product, &center),
            Err(ScoreError::RequiresMeanPooling)
        ));
    }

    #[test]
    fn uniform_baseline_matches_hand_computation() {
        let table = toy_table();
        // Product COC: ether bond matches both C-O rules (2 candidates each,
        // automorphic halves collapse to.. compute directly).
        let product = parse_molecule("COC").unwrap();
        let ether = parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]").unwrap();
        let t = table.get(table.index_of(ether.template_key()).unwrap());
        let truth = crate::template::apply_template(t, &product)[0].mols.clone();
        let rec = ReactionRecord {
            record_id: "r".into(),
            product: product.clone(),
            reactants: truth,
            reaction_class: None,
        };
        let st = compute_support_t("r", &product, &table).unwrap();
        let n_t = st.n_templates() as f64;
        let mut expected = 0.0;
        for idx in st.template_indices() {
            let sr = compute_support_r("r", &product, table.get(idx)).unwrap();
            if sr.find(&rec.truth_keys()).is_some() {
                expected += 1.0 / (n_t * sr.candidates.len() as f64);
            }
        }
        let got = uniform_baseline_top1(&table, &OnTheFly, &[rec]).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}
