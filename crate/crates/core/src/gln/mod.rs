//! The conditional energy model: six graph embedders behind three
//! compatibility scores, and the probability distributions they induce over
//! restricted supports.
//!
//! Scores: `v1(o,O) = g1(o)' g2(O)` ranks reaction centers inside a product,
//! `v2({r},O) = g3(O)' mean_i g4(r_i)` ranks rules sharing a center, and
//! `w2(R,O) = g5(O)' mean_j g6(R_j)` ranks generated reactant sets (the
//! template enters `w2` only through the support restriction). An optional
//! bilinear matrix generalizes each inner product.
//!
//! The rule distribution is hierarchical: a softmax over distinct centers
//! times a softmax over the rules sharing the observed center, each
//! restricted to matched templates only. Reactant-set probabilities
//! normalize over the cached candidates a rule generates.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{CanonicalKey, MolGraph};
use crate::embed::{
    self, container::NamedTensor, embed as embed_graph, featurize_molecule, featurize_pattern,
    EmbedConfig, EmbedError, EmbedderGrads, EmbedderParams, FeatGraph, FeatureConfig,
};
use crate::pattern::PatternGraph;
use crate::template::{self, CandidateSet, RetroTemplate, TemplateTable};

pub const MAX_SUPPORT: usize = 10_000;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("empty support")]
    EmptySupport,
    #[error("empty reactant/pattern set")]
    EmptySet,
    #[error("support of {0} entries exceeds the cap of {MAX_SUPPORT}")]
    SupportCapExceeded(usize),
    #[error("per-atom attribution requires mean pooling")]
    RequiresMeanPooling,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compat {
    InnerProduct,
    Bilinear,
}

/// Which of the three energies a pairing belongs to; selects the bilinear
/// matrix when one is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Energy {
    V1,
    V2,
    W2,
}

impl Energy {
    fn index(self) -> usize {
        match self {
            Energy::V1 => 0,
            Energy::V2 => 1,
            Energy::W2 => 2,
        }
    }
}

/// Embedder roles by index: g1 scores centers, g2/g3/g5 score the product
/// within v1/v2/w2, g4 scores reactant patterns, g6 reactant molecules.
pub const G1: usize = 0;
pub const G2: usize = 1;
pub const G3: usize = 2;
pub const G4: usize = 3;
pub const G5: usize = 4;
pub const G6: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub features: FeatureConfig,
    pub compat: Compat,
    pub class_conditional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: EmbedConfig::default(),
            features: FeatureConfig::default(),
            compat: Compat::InnerProduct,
            class_conditional: false,
        }
    }
}

/// The full parameter set plus its configuration.
#[derive(Debug, Clone)]
pub struct GlnModel {
    pub embedders: [EmbedderParams; 6],
    pub bilinear: Option<[Array2<f64>; 3]>,
    pub features: FeatureConfig,
    pub compat: Compat,
    pub class_conditional: bool,
    pub seed: u64,
}

impl GlnModel {
    pub fn init(config: &ModelConfig, seed: u64) -> GlnModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let nf = config.features.node_dim();
        let ef = config.features.edge_dim();
        let embedders = std::array::from_fn(|_| EmbedderParams::init(config.embed, nf, ef, &mut rng));
        let bilinear = match config.compat {
            Compat::InnerProduct => None,
            Compat::Bilinear => {
                let d = config.embed.dim;
                let bound = 1.0 / (d as f64).sqrt();
                Some(std::array::from_fn(|_| {
                    Array2::from_shape_fn((d, d), |_| rng.gen_range(-bound..=bound))
                }))
            }
        };
        GlnModel {
            embedders,
            bilinear,
            features: config.features.clone(),
            compat: config.compat,
            class_conditional: config.class_conditional,
            seed,
        }
    }

    pub fn zeros(config: &ModelConfig) -> GlnModel {
        let nf = config.features.node_dim();
        let ef = config.features.edge_dim();
        let embedders = std::array::from_fn(|_| EmbedderParams::zeros(config.embed, nf, ef));
        let bilinear = match config.compat {
            Compat::InnerProduct => None,
            Compat::Bilinear => {
                let d = config.embed.dim;
                Some(std::array::from_fn(|_| Array2::zeros((d, d))))
            }
        };
        GlnModel {
            embedders,
            bilinear,
            features: config.features.clone(),
            compat: config.compat,
            class_conditional: config.class_conditional,
            seed: 0,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            embed: self.embedders[0].config,
            features: self.features.clone(),
            compat: self.compat,
            class_conditional: self.class_conditional,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedders[0].config.dim
    }

    pub fn n_params(&self) -> usize {
        let mut n: usize = self.embedders.iter().map(|e| e.n_params()).sum();
        if let Some(bs) = &self.bilinear {
            n += bs.iter().map(|b| b.len()).sum::<usize>();
        }
        n
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for e in &self.embedders {
            e.flatten_into(&mut out);
        }
        if let Some(bs) = &self.bilinear {
            for b in bs {
                out.extend(b.iter());
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut off = 0;
        for e in &mut self.embedders {
            let n = e.n_params();
            e.set_from_flat(&flat[off..off + n]);
            off += n;
        }
        if let Some(bs) = &mut self.bilinear {
            for b in bs {
                for slot in b.iter_mut() {
                    *slot = flat[off];
                    off += 1;
                }
            }
        }
    }

    pub fn featurize_mol(&self, mol: &MolGraph) -> FeatGraph {
        featurize_molecule(&self.features, mol)
    }

    pub fn featurize_pat(&self, p: &PatternGraph) -> FeatGraph {
        featurize_pattern(&self.features, p)
    }

    pub fn embed_with(&self, which: usize, g: &FeatGraph) -> Result<Array1<f64>, EmbedError> {
        Ok(embed_graph(&self.embedders[which], g)?.graph_embedding)
    }

    /// Compatibility of two embeddings under the configured form.
    pub fn pair_score(&self, energy: Energy, left: &Array1<f64>, right: &Array1<f64>) -> f64 {
        match &self.bilinear {
            None => left.dot(right),
            Some(bs) => left.dot(&bs[energy.index()].dot(right)),
        }
    }

    /// d(score)/d(left) and d(score)/d(right).
    pub(crate) fn pair_score_backward(
        &self,
        energy: Energy,
        left: &Array1<f64>,
        right: &Array1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        match &self.bilinear {
            None => (right.clone(), left.clone()),
            Some(bs) => {
                let a = &bs[energy.index()];
                (a.dot(right), a.t().dot(left))
            }
        }
    }

    /// Center affinity: how well pattern `o` fits inside the product.
    pub fn v1(&self, o: &PatternGraph, product: &MolGraph) -> Result<f64, ScoreError> {
        let go = self.embed_with(G1, &self.featurize_pat(o))?;
        let gp = self.embed_with(G2, &self.featurize_mol(product))?;
        Ok(self.pair_score(Energy::V1, &go, &gp))
    }

    /// Rule affinity: product embedding against the mean reactant-pattern
    /// embedding. Order invariant by construction.
    pub fn v2(&self, rs: &[PatternGraph], product: &MolGraph) -> Result<f64, ScoreError> {
        if rs.is_empty() {
            return Err(ScoreError::EmptySet);
        }
        let gp = self.embed_with(G3, &self.featurize_mol(product))?;
        let mean = self.mean_embedding(G4, rs.iter().map(|r| self.featurize_pat(r)))?;
        Ok(self.pair_score(Energy::V2, &gp, &mean))
    }

    /// Reactant-set affinity: product embedding against the mean reactant
    /// molecule embedding.
    pub fn w2(&self, reactants: &[MolGraph], product: &MolGraph) -> Result<f64, ScoreError> {
        if reactants.is_empty() {
            return Err(ScoreError::EmptySet);
        }
        let gp = self.embed_with(G5, &self.featurize_mol(product))?;
        let mean = self.mean_embedding(G6, reactants.iter().map(|r| self.featurize_mol(r)))?;
        Ok(self.pair_score(Energy::W2, &gp, &mean))
    }

    fn mean_embedding(
        &self,
        which: usize,
        graphs: impl Iterator<Item = FeatGraph>,
    ) -> Result<Array1<f64>, ScoreError> {
        let mut sum = Array1::zeros(self.dim());
        let mut count = 0usize;
        for g in graphs {
            sum += &self.embed_with(which, &g)?;
            count += 1;
        }
        if count == 0 {
            return Err(ScoreError::EmptySet);
        }
        Ok(sum / count as f64)
    }

    /// Template confidence `w1 = v1 + v2`.
    pub fn w1(&self, t: &RetroTemplate, product: &MolGraph) -> Result<f64, ScoreError> {
        Ok(self.v1(t.product_pattern(), product)?
            + self.v2(t.reactant_patterns(), product)?)
    }
}

// ---------------------------------------------------------------------------
// Supports
// ---------------------------------------------------------------------------

/// Matched templates for one product, grouped by distinct reaction center.
#[derive(Debug, Clone)]
pub struct SupportT {
    pub product_id: String,
    pub groups: Vec<CenterGroup>,
}

#[derive(Debug, Clone)]
pub struct CenterGroup {
    pub center_key: String,
    /// Representative center pattern (maps are irrelevant to scoring).
    pub center: PatternGraph,
    /// Table indices of the member templates, ascending.
    pub members: Vec<usize>,
}

impl SupportT {
    /// Group matched template indices by center key. Groups are ordered by
    /// center key, members by template key, so builds are deterministic.
    pub fn build(
        product_id: impl Into<String>,
        table: &TemplateTable,
        matched: &[usize],
    ) -> Result<SupportT, ScoreError> {
        if matched.len() > MAX_SUPPORT {
            return Err(ScoreError::SupportCapExceeded(matched.len()));
        }
        let mut by_center: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
        for &i in matched {
            by_center
                .entry(table.get(i).center_key().to_string())
                .or_default()
                .push(i);
        }
        let groups = by_center
            .into_iter()
            .map(|(center_key, mut members)| {
                members.sort_unstable();
                CenterGroup {
                    center: table.get(members[0]).product_pattern().clone(),
                    center_key,
                    members,
                }
            })
            .collect();
        Ok(SupportT {
            product_id: product_id.into(),
            groups,
        })
    }

    pub fn n_templates(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn template_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().flat_map(|g| g.members.iter().copied())
    }

    /// Group index and within-group position of a template key.
    pub fn locate(&self, table: &TemplateTable, key: &str) -> Option<(usize, usize)> {
        let idx = table.index_of(key)?;
        for (gi, g) in self.groups.iter().enumerate() {
            if let Some(mi) = g.members.iter().position(|&m| m == idx) {
                return Some((gi, mi));
            }
        }
        None
    }

    /// Keep only templates of reaction type `c`; downstream distributions
    /// renormalize over the reduced support.
    pub fn restrict_by_class(&self, c: u8, table: &TemplateTable) -> Result<SupportT, ScoreError> {
        let matched: Vec<usize> = self
            .template_indices()
            .filter(|&i| table.get(i).class_tag() == Some(c))
            .collect();
        if matched.is_empty() {
            return Err(ScoreError::EmptySupport);
        }
        SupportT::build(self.product_id.clone(), table, &matched)
    }
}

/// Candidate reactant sets one template generates for one product.
#[derive(Debug, Clone)]
pub struct SupportR {
    pub product_id: String,
    pub template_key: String,
    pub candidates: Vec<CandidateSet>,
}

impl SupportR {
    pub fn find(&self, keys: &[CanonicalKey]) -> Option<usize> {
        self.candidates.iter().position(|c| c.keys == keys)
    }
}

/// Matched-template support for a product: the applicability predicate
/// evaluated over the whole table.
pub fn compute_support_t(
    product_id: &str,
    product: &MolGraph,
    table: &TemplateTable,
) -> Result<SupportT, ScoreError> {
    let matched: Vec<usize> = (0..table.len())
        .filter(|&i| template::phi_match_template(product, table.get(i), table))
        .collect();
    SupportT::build(product_id, table, &matched)
}

/// Candidate support for one (product, template) pair.
pub fn compute_support_r(
    product_id: &str,
    product: &MolGraph,
    t: &RetroTemplate,
) -> Result<SupportR, ScoreError> {
    let candidates = template::apply_template(t, product);
    if candidates.len() > MAX_SUPPORT {
        return Err(ScoreError::SupportCapExceeded(candidates.len()));
    }
    Ok(SupportR {
        product_id: product_id.to_string(),
        template_key: t.template_key().to_string(),
        candidates,
    })
}

// ---------------------------------------------------------------------------
// Distributions
// ---------------------------------------------------------------------------

/// Numerically stable softmax (max-subtraction).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    assert!(!scores.is_empty());
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_sum_exp(scores: &[f64]) -> f64 {
    assert!(!scores.is_empty());
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|&s| (s - m).exp()).sum::<f64>().ln()
}

/// Joint log-probability outcome: a support miss is an explicit flag, never
/// a raw infinity that could leak into comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointScore {
    Value(f64),
    Miss,
}

impl JointScore {
    pub fn value(self) -> Option<f64> {
        match self {
            JointScore::Value(v) => Some(v),
            JointScore::Miss => None,
        }
    }
}

impl GlnModel {
    /// p(center | product) over the distinct centers of the support.
    pub fn prob_center(
        &self,
        product: &MolGraph,
        support: &SupportT,
    ) -> Result<Vec<f64>, ScoreError> {
        if support.is_empty() {
            return Err(ScoreError::EmptySupport);
        }
        let gp = self.embed_with(G2, &self.featurize_mol(product))?;
        let scores: Vec<f64> = support
            .groups
            .iter()
            .map(|g| {
                let go = self.embed_with(G1, &self.featurize_pat(&g.center))?;
                Ok(self.pair_score(Energy::V1, &go, &gp))
            })
            .collect::<Result<_, ScoreError>>()?;
        Ok(softmax(&scores))
    }

    /// p(template | product, center) within one center group.
    pub fn prob_template_given_center(
        &self,
        product: &MolGraph,
        group: &CenterGroup,
        table: &TemplateTable,
    ) -> Result<Vec<f64>, ScoreError> {
        if group.members.is_empty() {
            return Err(ScoreError::EmptySupport);
        }
        let gp = self.embed_with(G3, &self.featurize_mol(product))?;
        let scores: Vec<f64> = group
            .members
            .iter()
            .map(|&i| {
                let mean = self.mean_embedding(
                    G4,
                    table.get(i).reactant_patterns().iter().map(|r| self.featurize_pat(r)),
                )?;
                Ok(self.pair_score(Energy::V2, &gp, &mean))
            })
            .collect::<Result<_, ScoreError>>()?;
        Ok(softmax(&scores))
    }

    /// p(template | product) over the whole support: chain of the center
    /// distribution and the per-center rule distribution. Returned aligned
    /// with `support.template_indices()`.
    pub fn prob_template(
        &self,
        product: &MolGraph,
        support: &SupportT,
        table: &TemplateTable,
    ) -> Result<Vec<(usize, f64)>, ScoreError> {
        let p_center = self.prob_center(product, support)?;
        let mut out = Vec::with_capacity(support.n_templates());
        for (gi, group) in support.groups.iter().enumerate() {
            let p_t = self.prob_template_given_center(product, group, table)?;
            for (mi, &idx) in group.members.iter().enumerate() {
                out.push((idx, p_center[gi] * p_t[mi]));
            }
        }
        Ok(out)
    }

    /// p(reactant set | template, product) over the cached candidates.
    pub fn prob_reactants(
        &self,
        product: &MolGraph,
        support: &SupportR,
    ) -> Result<Vec<f64>, ScoreError> {
        if support.candidates.is_empty() {
            return Err(ScoreError::EmptySupport);
        }
        let gp = self.embed_with(G5, &self.featurize_mol(product))?;
        let scores: Vec<f64> = support
            .candidates
            .iter()
            .map(|c| {
                let mean = self.mean_embedding(G6, c.mols.iter().map(|m| self.featurize_mol(m)))?;
                Ok(self.pair_score(Energy::W2, &gp, &mean))
            })
            .collect::<Result<_, ScoreError>>()?;
        Ok(softmax(&scores))
    }

    /// log p(T|O) + log p(R|T,O), or a miss flag when either predicate
    /// fails (template not matched, or reactant set not among the
    /// template's candidates).
    pub fn joint_log_prob(
        &self,
        product: &MolGraph,
        template_key: &str,
        reactant_keys: &[CanonicalKey],
        support_t: &SupportT,
        support_r: Option<&SupportR>,
        table: &TemplateTable,
    ) -> Result<JointScore, ScoreError> {
        let (gi, mi) = match support_t.locate(table, template_key) {
            Some(loc) => loc,
            None => return Ok(JointScore::Miss),
        };
        let sr = match support_r {
            Some(sr) if sr.template_key == template_key => sr,
            _ => return Ok(JointScore::Miss),
        };
        let ci = match sr.find(reactant_keys) {
            Some(ci) => ci,
            None => return Ok(JointScore::Miss),
        };
        let p_center = self.prob_center(product, support_t)?;
        let p_t = self.prob_template_given_center(product, &support_t.groups[gi], table)?;
        let p_r = self.prob_reactants(product, sr)?;
        Ok(JointScore::Value(
            p_center[gi].ln() + p_t[mi].ln() + p_r[ci].ln(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Gradient container
// ---------------------------------------------------------------------------

/// Gradient of a scalar loss with respect to every model parameter.
#[derive(Debug, Clone)]
pub struct GlnGrads {
    pub embedders: [EmbedderGrads; 6],
    pub bilinear: Option<[Array2<f64>; 3]>,
}

impl GlnGrads {
    pub fn zeros_like(model: &GlnModel) -> GlnGrads {
        GlnGrads {
            embedders: std::array::from_fn(|i| EmbedderGrads::zeros_like(&model.embedders[i])),
            bilinear: model
                .bilinear
                .as_ref()
                .map(|bs| std::array::from_fn(|i| Array2::zeros(bs[i].raw_dim()))),
        }
    }

    pub fn add_assign(&mut self, other: &GlnGrads) {
        for (a, b) in self.embedders.iter_mut().zip(&other.embedders) {
            a.add_assign(b);
        }
        if let (Some(xs), Some(ys)) = (self.bilinear.as_mut(), other.bilinear.as_ref()) {
            for (x, y) in xs.iter_mut().zip(ys) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for e in &mut self.embedders {
            e.scale(s);
        }
        if let Some(bs) = &mut self.bilinear {
            for b in bs {
                *b *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq: f64 = self.embedders.iter().map(|e| e.sq_norm()).sum();
        if let Some(bs) = &self.bilinear {
            sq += bs
                .iter()
                .map(|b| b.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>();
        }
        sq.sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.embedders {
            e.flatten_into(&mut out);
        }
        if let Some(bs) = &self.bilinear {
            for b in bs {
                out.extend(b.iter());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.embedders
            .iter()
            .all(|e| {
                [&e.theta1, &e.theta2, &e.theta3, &e.theta4]
                    .iter()
                    .all(|m| m.iter().all(|x| x.is_finite()))
            })
            && self
                .bilinear
                .as_ref()
                .map_or(true, |bs| bs.iter().all(|b| b.iter().all(|x| x.is_finite())))
    }
}

// ---------------------------------------------------------------------------
// Serialization: binary container + JSON sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
}

impl GlnModel {
    /// Write `model.bin` (tensors) and `model.json` (config sidecar) into a
    /// directory.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<(), ModelIoError> {
        std::fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        for (i, e) in self.embedders.iter().enumerate() {
            let g = i + 1;
            for (name, m) in [
                ("theta1", &e.theta1),
                ("theta2", &e.theta2),
                ("theta3", &e.theta3),
                ("theta4", &e.theta4),
            ] {
                tensors.push(NamedTensor::new(
                    format!("g{g}.{name}"),
                    vec![m.nrows(), m.ncols()],
                    m.iter().cloned().collect(),
                ));
            }
        }
        if let Some(bs) = &self.bilinear {
            for (i, b) in bs.iter().enumerate() {
                tensors.push(NamedTensor::new(
                    format!("bilinear.{i}"),
                    vec![b.nrows(), b.ncols()],
                    b.iter().cloned().collect(),
                ));
            }
        }
        embed::container::save_tensors(&dir.join("model.bin"), &tensors)?;
        let meta = ModelMeta {
            format_version: 1,
            config: self.config(),
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&meta).expect("serializable meta");
        std::fs::write(dir.join("model.json"), json)?;
        Ok(())
    }

    pub fn load_dir(dir: &std::path::Path) -> Result<GlnModel, ModelIoError> {
        let meta: ModelMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)
                .map_err(|e| ModelIoError::Meta(e.to_string()))?;
        let tensors = embed::container::load_tensors(&dir.join("model.bin"))?;
        let by_name: std::collections::HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut model = GlnModel::zeros(&meta.config);
        model.seed = meta.seed;
        for i in 0..6 {
            let g = i + 1;
            for (name, slot) in [
                ("theta1", 0usize),
                ("theta2", 1),
                ("theta3", 2),
                ("theta4", 3),
            ] {
                let key = format!("g{g}.{name}");
                let t = by_name
                    .get(key.as_str())
                    .ok_or_else(|| ModelIoError::Meta(format!("missing tensor {key}")))?;
                if t.dims.len() != 2 {
                    return Err(ModelIoError::Meta(format!("tensor {key} not 2-d")));
                }
                let arr = Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone())
                    .map_err(|e| ModelIoError::Meta(e.to_string()))?;
                let e = &mut model.embedders[i];
                let target = match slot {
                    0 => &mut e.theta1,
                    1 => &mut e.theta2,
                    2 => &mut e.theta3,
                    _ => &mut e.theta4,
                };
                if target.raw_dim() != arr.raw_dim() {
                    return Err(ModelIoError::Meta(format!("tensor {key} shape mismatch")));
                }
                *target = arr;
            }
        }
        if let Some(bs) = &mut model.bilinear {
            for (i, b) in bs.iter_mut().enumerate() {
                let key = format!("bilinear.{i}");
                let t = by_name
                    .get(key.as_str())
                    .ok_or_else(|| ModelIoError::Meta(format!("missing tensor {key}")))?;
                let arr = Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone())
                    .map_err(|e| ModelIoError::Meta(e.to_string()))?;
                if b.raw_dim() != arr.raw_dim() {
                    return Err(ModelIoError::Meta(format!("tensor {key} shape mismatch")));
                }
                *b = arr;
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] embed::container::ContainerError),
    #[error("metadata error: {0}")]
    Meta(String),
}
