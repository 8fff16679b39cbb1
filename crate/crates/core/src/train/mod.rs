//! Maximum-likelihood training over the restricted supports.
//!
//! The per-item loss is the negative log of the hierarchical joint:
//! `-ln p(center|O) - ln p(T|O,center) - ln p(R|T,O)`, each softmax
//! restricted to the cached support. The exact gradient enumerates every
//! support entry; the sampled estimator replaces each negative-phase
//! expectation with one categorical draw (from the model: unbiased; from
//! the uniform proposal: the cheap biased variant, no reweighting).
//! Only the observed center's rule group enters the middle term, so items
//! carry exactly the graphs the likelihood touches.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::CanonicalKey;
use crate::chem::MolGraph;
use crate::embed::{embed_with_gradient, FeatGraph, Upstream};
use crate::gln::{
    log_sum_exp, softmax, Energy, GlnGrads, GlnModel, ScoreError, SupportR, SupportT, G1, G2, G3,
    G4, G5, G6,
};
use crate::template::TemplateTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    SampledModel,
    SampledUniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_updates: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub optimizer: Optimizer,
    pub estimator: Estimator,
    pub seed: u64,
    pub class_conditional: bool,
    /// Updates between metric evaluations (update 0 always evaluates).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_updates: 150_000,
            max_epochs: usize::MAX,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            optimizer: Optimizer::Adam,
            estimator: Estimator::Exact,
            seed: 0,
            class_conditional: false,
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0
            || self.max_updates == 0
            || self.max_epochs == 0
            || self.eval_interval == 0
        {
            return Err(TrainError::BadConfig("counts must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(TrainError::BadConfig(
                "learning_rate must be >= 0 and grad_clip > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("record {record_id}: ground-truth {what} missing from its own cache")]
    SupportMiss { record_id: String, what: &'static str },
    #[error("non-finite loss or gradient at update {update}")]
    NonFinite { update: usize },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// One training example, featurized once. Holds the distinct centers of the
/// product's support, the rule group of the observed center, and the
/// candidate reactant sets of the observed rule.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub record_id: String,
    pub product: FeatGraph,
    pub centers: Vec<FeatGraph>,
    pub data_group: usize,
    pub data_member: usize,
    pub group_rsets: Vec<Vec<FeatGraph>>,
    pub candidates: Vec<Vec<FeatGraph>>,
    pub data_candidate: usize,
}

/// Assemble a training item from the caches; errors signal a data bug
/// (the ground truth must be a member of its own support).
#[allow(clippy::too_many_arguments)]
pub fn build_item(
    model: &GlnModel,
    table: &TemplateTable,
    record_id: &str,
    product: &MolGraph,
    support_t: &SupportT,
    support_r: &SupportR,
    template_key: &str,
    truth_keys: &[CanonicalKey],
) -> Result<TrainItem, TrainError> {
    let (dg, dm) = support_t
        .locate(table, template_key)
        .ok_or_else(|| TrainError::SupportMiss {
            record_id: record_id.to_string(),
            what: "template",
        })?;
    let dc = support_r
        .find(truth_keys)
        .ok_or_else(|| TrainError::SupportMiss {
            record_id: record_id.to_string(),
            what: "reactant set",
        })?;
    let centers = support_t
        .groups
        .iter()
        .map(|g| model.featurize_pat(&g.center))
        .collect();
    let group_rsets = support_t.groups[dg]
        .members
        .iter()
        .map(|&i| {
            table
                .get(i)
                .reactant_patterns()
                .iter()
                .map(|r| model.featurize_pat(r))
                .collect()
        })
        .collect();
    let candidates = support_r
        .candidates
        .iter()
        .map(|c| c.mols.iter().map(|m| model.featurize_mol(m)).collect())
        .collect();
    Ok(TrainItem {
        record_id: record_id.to_string(),
        product: model.featurize_mol(product),
        centers,
        data_group: dg,
        data_member: dm,
        group_rsets,
        candidates,
        data_candidate: dc,
    })
}

struct ItemForward {
    g2o: Array1<f64>,
    g3o: Array1<f64>,
    g5o: Array1<f64>,
    g1_centers: Vec<Array1<f64>>,
    g4_rsets: Vec<Vec<Array1<f64>>>,
    rset_means: Vec<Array1<f64>>,
    g6_cands: Vec<Vec<Array1<f64>>>,
    cand_means: Vec<Array1<f64>>,
    p_center: Vec<f64>,
    p_tmpl: Vec<f64>,
    p_react: Vec<f64>,
    nll: f64,
}

fn mean_of(vectors: &[Array1<f64>]) -> Array1<f64> {
    let mut s = Array1::zeros(vectors[0].len());
    for v in vectors {
        s += v;
    }
    s / vectors.len() as f64
}

fn item_forward(model: &GlnModel, item: &TrainItem) -> Result<ItemForward, TrainError> {
    let g2o = model.embed_with(G2, &item.product).map_err(ScoreError::from)?;
    let g3o = model.embed_with(G3, &item.product).map_err(ScoreError::from)?;
    let g5o = model.embed_with(G5, &item.product).map_err(ScoreError::from)?;
    let g1_centers: Vec<Array1<f64>> = item
        .centers
        .iter()
        .map(|c| model.embed_with(G1, c))
        .collect::<Result<_, _>>()
        .map_err(ScoreError::from)?;
    let g4_rsets: Vec<Vec<Array1<f64>>> = item
        .group_rsets
        .iter()
        .map(|rs| rs.iter().map(|r| model.embed_with(G4, r)).collect())
        .collect::<Result<_, _>>()
        .map_err(ScoreError::from)?;
    let g6_cands: Vec<Vec<Array1<f64>>> = item
        .candidates
        .iter()
        .map(|c| c.iter().map(|m| model.embed_with(G6, m)).collect())
        .collect::<Result<_, _>>()
        .map_err(ScoreError::from)?;
    let rset_means: Vec<Array1<f64>> = g4_rsets.iter().map(|v| mean_of(v)).collect();
    let cand_means: Vec<Array1<f64>> = g6_cands.iter().map(|v| mean_of(v)).collect();

    let v1: Vec<f64> = g1_centers
        .iter()
        .map(|g1| model.pair_score(Energy::V1, g1, &g2o))
        .collect();
    let v2: Vec<f64> = rset_means
        .iter()
        .map(|m| model.pair_score(Energy::V2, &g3o, m))
        .collect();
    let w2: Vec<f64> = cand_means
        .iter()
        .map(|m| model.pair_score(Energy::W2, &g5o, m))
        .collect();
    let nll = -(v1[item.data_group] - log_sum_exp(&v1))
        - (v2[item.data_member] - log_sum_exp(&v2))
        - (w2[item.data_candidate] - log_sum_exp(&w2));
    Ok(ItemForward {
        g2o,
        g3o,
        g5o,
        g1_centers,
        g4_rsets,
        rset_means,
        g6_cands,
        cand_means,
        p_center: softmax(&v1),
        p_tmpl: softmax(&v2),
        p_react: softmax(&w2),
        nll,
    })
}

/// Softmax-gradient coefficients per score slot; `p - onehot(data)` for the
/// exact gradient, `onehot(sample) - onehot(data)` for one-sample
/// estimates.
struct Coeffs {
    center: Vec<f64>,
    tmpl: Vec<f64>,
    cand: Vec<f64>,
}

fn accumulate_item_grads(
    model: &GlnModel,
    item: &TrainItem,
    fwd: &ItemForward,
    coeffs: &Coeffs,
    grads: &mut GlnGrads,
) -> Result<(), TrainError> {
    let d = model.dim();
    let mut up_g2: Array1<f64> = Array1::zeros(d);
    let mut up_g3: Array1<f64> = Array1::zeros(d);
    let mut up_g5: Array1<f64> = Array1::zeros(d);

    for (g, &c) in coeffs.center.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (dl, dr) = model.pair_score_backward(Energy::V1, &fwd.g1_centers[g], &fwd.g2o);
        let up = dl.mapv(|x| c * x);
        let eg = embed_with_gradient(&model.embedders[G1], &item.centers[g], Upstream::Graph(&up))
            .map_err(ScoreError::from)?;
        grads.embedders[G1].add_assign(&eg);
        up_g2.scaled_add(c, &dr);
        if let Some(bs) = grads.bilinear.as_mut() {
            bilinear_acc(&mut bs[0], c, &fwd.g1_centers[g], &fwd.g2o);
        }
    }
    for (m, &c) in coeffs.tmpl.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (dl, dr) = model.pair_score_backward(Energy::V2, &fwd.g3o, &fwd.rset_means[m]);
        up_g3.scaled_add(c, &dl);
        let k = item.group_rsets[m].len() as f64;
        for (pat, _emb) in item.group_rsets[m].iter().zip(&fwd.g4_rsets[m]) {
            let up = dr.mapv(|x| c * x / k);
            let eg = embed_with_gradient(&model.embedders[G4], pat, Upstream::Graph(&up))
                .map_err(ScoreError::from)?;
            grads.embedders[G4].add_assign(&eg);
        }
        if let Some(bs) = grads.bilinear.as_mut() {
            bilinear_acc(&mut bs[1], c, &fwd.g3o, &fwd.rset_means[m]);
        }
    }
    for (j, &c) in coeffs.cand.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (dl, dr) = model.pair_score_backward(Energy::W2, &fwd.g5o, &fwd.cand_means[j]);
        up_g5.scaled_add(c, &dl);
        let k = item.candidates[j].len() as f64;
        for (mol, _emb) in item.candidates[j].iter().zip(&fwd.g6_cands[j]) {
            let up = dr.mapv(|x| c * x / k);
            let eg = embed_with_gradient(&model.embedders[G6], mol, Upstream::Graph(&up))
                .map_err(ScoreError::from)?;
            grads.embedders[G6].add_assign(&eg);
        }
        if let Some(bs) = grads.bilinear.as_mut() {
            bilinear_acc(&mut bs[2], c, &fwd.g5o, &fwd.cand_means[j]);
        }
    }

    for (which, up) in [(G2, &up_g2), (G3, &up_g3), (G5, &up_g5)] {
        if up.iter().any(|&x| x != 0.0) {
            let eg = embed_with_gradient(&model.embedders[which], &item.product, Upstream::Graph(up))
                .map_err(ScoreError::from)?;
            grads.embedders[which].add_assign(&eg);
        }
    }
    Ok(())
}

fn bilinear_acc(acc: &mut ndarray::Array2<f64>, c: f64, left: &Array1<f64>, right: &Array1<f64>) {
    for (i, &li) in left.iter().enumerate() {
        if li != 0.0 {
            acc.row_mut(i).scaled_add(c * li, right);
        }
    }
}

/// Mean negative log joint probability over a batch.
pub fn nll_loss(model: &GlnModel, items: &[TrainItem]) -> Result<f64, TrainError> {
    assert!(!items.is_empty(), "empty batch");
    let mut total = 0.0;
    for item in items {
        total += item_forward(model, item)?.nll;
    }
    Ok(total / items.len() as f64)
}

/// Exact gradient of `nll_loss` by full enumeration of the supports.
pub fn grad_exact(model: &GlnModel, items: &[TrainItem]) -> Result<(f64, GlnGrads), TrainError> {
    assert!(!items.is_empty(), "empty batch");
    let mut grads = GlnGrads::zeros_like(model);
    let mut total = 0.0;
    let scale = 1.0 / items.len() as f64;
    for item in items {
        let fwd = item_forward(model, item)?;
        total += fwd.nll;
        let onehot = |n: usize, hot: usize, p: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|i| scale * (p[i] - if i == hot { 1.0 } else { 0.0 }))
                .collect()
        };
        let coeffs = Coeffs {
            center: onehot(item.centers.len(), item.data_group, &fwd.p_center),
            tmpl: onehot(item.group_rsets.len(), item.data_member, &fwd.p_tmpl),
            cand: onehot(item.candidates.len(), item.data_candidate, &fwd.p_react),
        };
        accumulate_item_grads(model, item, &fwd, &coeffs, &mut grads)?;
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposal {
    Model,
    Uniform,
}

/// One-sample gradient estimate for a single item. With the model proposal
/// the negative phase draws from the exact restricted-support softmax, so
/// the estimate is unbiased for `grad_exact`; the uniform proposal skips
/// the score computation for the draw and is biased by design.
pub fn grad_sampled<R: Rng>(
    model: &GlnModel,
    item: &TrainItem,
    proposal: Proposal,
    rng: &mut R,
) -> Result<(f64, GlnGrads), TrainError> {
    let fwd = item_forward(model, item)?;
    let draw = |probs: &[f64], rng: &mut R| -> usize {
        match proposal {
            Proposal::Model => sample_categorical(probs, rng),
            Proposal::Uniform => rng.gen_range(0..probs.len()),
        }
    };
    let g_tilde = draw(&fwd.p_center, rng);
    let m_tilde = draw(&fwd.p_tmpl, rng);
    let j_tilde = draw(&fwd.p_react, rng);
    let mut coeffs = Coeffs {
        center: vec![0.0; item.centers.len()],
        tmpl: vec![0.0; item.group_rsets.len()],
        cand: vec![0.0; item.candidates.len()],
    };
    coeffs.center[g_tilde] += 1.0;
    coeffs.center[item.data_group] -= 1.0;
    coeffs.tmpl[m_tilde] += 1.0;
    coeffs.tmpl[item.data_member] -= 1.0;
    coeffs.cand[j_tilde] += 1.0;
    coeffs.cand[item.data_candidate] -= 1.0;
    let mut grads = GlnGrads::zeros_like(model);
    accumulate_item_grads(model, item, &fwd, &coeffs, &mut grads)?;
    Ok((fwd.nll, grads))
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// Optimizer and loop
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One metrics-log line. Wall time varies run to run; reproducibility
/// comparisons ignore it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GlnModel,
    pub metrics: Vec<MetricsRecord>,
    /// Update index whose parameters are returned (best validation top-1
    /// when a validation split exists, else the final update).
    pub best_update: usize,
}

/// Run the optimization loop: seeded shuffling, per-update global-norm
/// clipping, periodic evaluation through `top1_fn`, checkpointing the best
/// validation accuracy. Aborts on the first non-finite loss or gradient.
pub fn train(
    init: GlnModel,
    train_items: &[TrainItem],
    config: &TrainConfig,
    top1_fn: impl FnMut(&GlnModel) -> (f64, Option<f64>),
) -> Result<TrainOutcome, TrainError> {
    train_with_val(init, train_items, None, config, top1_fn)
}

/// `train` plus a validation split for the loss column of the metrics log.
pub fn train_with_val(
    init: GlnModel,
    train_items: &[TrainItem],
    val_items: Option<&[TrainItem]>,
    config: &TrainConfig,
    mut top1_fn: impl FnMut(&GlnModel) -> (f64, Option<f64>),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    assert!(!train_items.is_empty(), "empty training set");
    let started = std::time::Instant::now();
    let mut model = init;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.n_params());
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, GlnModel)> = None;
    let mut update = 0usize;

    let evaluate = |model: &GlnModel,
                        update: usize,
                        epoch: usize,
                        metrics: &mut Vec<MetricsRecord>,
                        best: &mut Option<(f64, usize, GlnModel)>,
                        top1_fn: &mut dyn FnMut(&GlnModel) -> (f64, Option<f64>)|
     -> Result<(), TrainError> {
        let train_loss = nll_loss(model, train_items)?;
        let val_loss = match val_items {
            Some(items) if !items.is_empty() => Some(nll_loss(model, items)?),
            _ => None,
        };
        let (train_top1, val_top1) = top1_fn(model);
        metrics.push(MetricsRecord {
            update,
            epoch,
            train_loss,
            train_top1,
            val_loss,
            val_top1,
            wall_ms: started.elapsed().as_millis(),
        });
        if let Some(v) = val_top1 {
            let improved = best.as_ref().map_or(true, |(b, _, _)| v > *b);
            if improved {
                *best = Some((v, update, model.clone()));
            }
        }
        Ok(())
    };

    evaluate(&model, 0, 0, &mut metrics, &mut best, &mut top1_fn)?;

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    'outer: for epoch in 1..=config.max_epochs {
        // Seeded Fisher-Yates shuffle per epoch.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let (loss, mut grads) = match config.estimator {
                Estimator::Exact => {
                    let batch: Vec<TrainItem> =
                        chunk.iter().map(|&i| train_items[i].clone()).collect();
                    grad_exact(&model, &batch)?
                }
                Estimator::SampledModel | Estimator::SampledUniform => {
                    let proposal = if config.estimator == Estimator::SampledModel {
                        Proposal::Model
                    } else {
                        Proposal::Uniform
                    };
                    let mut acc = GlnGrads::zeros_like(&model);
                    let mut total = 0.0;
                    for &i in chunk {
                        let (l, g) = grad_sampled(&model, &train_items[i], proposal, &mut rng)?;
                        total += l;
                        acc.add_assign(&g);
                    }
                    acc.scale(1.0 / chunk.len() as f64);
                    (total / chunk.len() as f64, acc)
                }
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite { update });
            }
            let norm = grads.global_norm();
            if norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            let mut flat = model.flat_params();
            let gflat = grads.flatten();
            match config.optimizer {
                Optimizer::Adam => adam.step(&mut flat, &gflat, config.learning_rate),
                Optimizer::Sgd => {
                    for (p, g) in flat.iter_mut().zip(&gflat) {
                        *p -= config.learning_rate * g;
                    }
                }
            }
            model.set_flat_params(&flat);
            update += 1;
            if update % config.eval_interval == 0 {
                evaluate(&model, update, epoch, &mut metrics, &mut best, &mut top1_fn)?;
            }
            if update >= config.max_updates {
                break 'outer;
            }
        }
        let last_eval = metrics.last().map(|m| m.update);
        if last_eval != Some(update) {
            evaluate(&model, update, epoch, &mut metrics, &mut best, &mut top1_fn)?;
        }
    }

    let (best_update, model) = match best {
        Some((_, u, m)) => (u, m),
        None => (update, model),
    };
    Ok(TrainOutcome {
        model,
        metrics,
        best_update,
    })
}

pub fn format_metrics_line(m: &MetricsRecord) -> String {
    serde_json::to_string(m).expect("serializable metrics")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::parse_molecule;
    use crate::embed::EmbedConfig;
    use crate::gln::{compute_support_r, compute_support_t, JointScore, ModelConfig};
    use crate::template::{parse_template_line, TemplateTable};

    fn small_model(seed: u64) -> GlnModel {
        let config = ModelConfig {
            embed: EmbedConfig {
                dim: 4,
                layers: 2,
                ..EmbedConfig::default()
            },
            ..ModelConfig::default()
        };
        GlnModel::init(&config, seed)
    }

    fn toy_table() -> TemplateTable {
        let t1 = parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]").unwrap();
        let t2 = parse_template_line("[C:1][O:2]>>[C:1]I.[O:2]").unwrap();
        let t3 = parse_template_line("[C:1][N:2]>>[C:1]Br.[N:2]").unwrap();
        TemplateTable::from_templates([t1, t2, t3])
    }

    /// A full synthetic item: product with both C-O and C-N motifs, truth =
    /// the ether rule's first candidate.
    fn toy_item(model: &GlnModel, table: &TemplateTable) -> TrainItem {
        let product = parse_molecule("CN(C)COC").unwrap();
        let st = compute_support_t("p", &product, table).unwrap();
        let ether = parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]").unwrap();
        let t = table.get(table.index_of(ether.template_key()).unwrap());
        let sr = compute_support_r("p", &product, t).unwrap();
        assert!(sr.candidates.len() >= 2, "need a multi-candidate support");
        let truth = sr.candidates[0].keys.clone();
        build_item(model, table, "p", &product, &st, &sr, t.template_key(), &truth).unwrap()
    }

    #[test]
    fn support_miss_is_an_error() {
        let model = small_model(1);
        let table = toy_table();
        let product = parse_molecule("COC").unwrap();
        let st = compute_support_t("p", &product, &table).unwrap();
        let ether = parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]").unwrap();
        let t = table.get(table.index_of(ether.template_key()).unwrap());
        let sr = compute_support_r("p", &product, t).unwrap();
        let bogus = vec![crate::chem::canonical_key(&parse_molecule("CCCC").unwrap())];
        let err = build_item(&model, &table, "p", &product, &st, &sr, t.template_key(), &bogus)
            .unwrap_err();
        assert!(matches!(err, TrainError::SupportMiss { what: "reactant set", .. }));
        let foreign = parse_template_line("[C:1][S:2]>>[C:1]Br.[S:2]").unwrap();
        let err = build_item(
            &model, &table, "p", &product, &st, &sr, foreign.template_key(), &sr.candidates[0].keys,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::SupportMiss { what: "template", .. }));
    }

    #[test]
    fn zero_params_loss_is_log_support_sizes() {
        let config = ModelConfig {
            embed: EmbedConfig {
                dim: 4,
                layers: 1,
                ..EmbedConfig::default()
            },
            ..ModelConfig::default()
        };
        let model = GlnModel::zeros(&config);
        let table = toy_table();
        let item = toy_item(&model, &table);
        // Two center groups, two rules in the ether group, two candidates.
        let expected = (item.centers.len() as f64).ln()
            + (item.group_rsets.len() as f64).ln()
            + (item.candidates.len() as f64).ln();
        let loss = nll_loss(&model, &[item]).unwrap();
        assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
    }

    #[test]
    fn loss_equals_negative_joint_log_prob() {
        let model = small_model(3);
        let table = toy_table();
        let product = parse_molecule("CN(C)COC").unwrap();
        let st = compute_support_t("p", &product, &table).unwrap();
        let ether = parse_template_line("[C:1][O:2]>>[C:1]Br.[O:2]").unwrap();
        let t = table.get(table.index_of(ether.template_key()).unwrap());
        let sr = compute_support_r("p", &product, t).unwrap();
        let truth = sr.candidates[1].keys.clone();
        let item = build_item(&model, &table, "p", &product, &st, &sr, t.template_key(), &truth)
            .unwrap();
        let loss = nll_loss(&model, &[item]).unwrap();
        let joint = model
            .joint_log_prob(&product, t.template_key(), &truth, &st, Some(&sr), &table)
            .unwrap();
        match joint {
            JointScore::Value(v) => assert!((loss + v).abs() < 1e-9, "loss {loss} joint {v}"),
            JointScore::Miss => panic!("truth must be in support"),
        }
    }

    #[test]
    fn singleton_supports_give_zero_loss_and_grad() {
        let model = small_model(4);
        let table = TemplateTable::from_templates([
            parse_template_line("[C:1][N:2]>>[C:1]Br.[N:2]").unwrap()
        ]);
        let product = parse_molecule("CCN").unwrap();
        let st = compute_support_t("p", &product, &table).unwrap();
        let t = table.get(0);
        let sr = compute_support_r("p", &product, t).unwrap();
        assert_eq!(sr.candidates.len(), 1);
        let item = build_item(
            &model, &table, "p", &product, &st, &sr, t.template_key(), &sr.candidates[0].keys,
        )
        .unwrap();
        let (loss, grads) = grad_exact(&model, &[item.clone()]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.global_norm(), 0.0);
        // Sampled draws are exactly zero too.
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let (l, g) = grad_sampled(&model, &item, Proposal::Model, &mut rng).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let model = small_model(5);
        let table = toy_table();
        let item = toy_item(&model, &table);
        let (_, g1) = grad_exact(&model, &[item.clone()]).unwrap();
        let (_, g2) = grad_exact(&model, &[item.clone(), item]).unwrap();
        let (f1, f2) = (g1.flatten(), g2.flatten());
        for (a, b) in f1.iter().zip(&f2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let model = small_model(6);
        let table = toy_table();
        let item = toy_item(&model, &table);
        let items = vec![item];
        let (_, grads) = grad_exact(&model, &items).unwrap();
        let gflat = grads.flatten();
        let base = model.flat_params();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..base.len() {
            let mut m = model.clone();
            let mut p = base.clone();
            p[k] += eps;
            m.set_flat_params(&p);
            let up = nll_loss(&m, &items).unwrap();
            p[k] -= 2.0 * eps;
            m.set_flat_params(&p);
            let down = nll_loss(&m, &items).unwrap();
            let fd = (up - down) / (2.0 * eps);
            let denom = gflat[k].abs().max(fd.abs()).max(1.0);
            worst = worst.max((gflat[k] - fd).abs() / denom);
        }
        assert!(worst < 1e-6, "finite-difference mismatch {worst}");
    }

    #[test]
    fn sampled_estimator_is_deterministic_given_seed() {
        let model = small_model(7);
        let table = toy_table();
        let item = toy_item(&model, &table);
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            let (_, g) = grad_sampled(&model, &item, Proposal::Model, &mut rng).unwrap();
            g.flatten()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampled_mean_approaches_exact_gradient() {
        // Small-sample sanity; the acceptance suite runs the full
        // 200k-sample, 3-standard-error version.
        let model = small_model(8);
        let table = toy_table();
        let item = toy_item(&model, &table);
        let (_, exact) = grad_exact(&model, &[item.clone()]).unwrap();
        let eflat = exact.flatten();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let n = 4000;
        let mut mean = vec![0.0; eflat.len()];
        for _ in 0..n {
            let (_, g) = grad_sampled(&model, &item, Proposal::Model, &mut rng).unwrap();
            for (m, x) in mean.iter_mut().zip(g.flatten()) {
                *m += x / n as f64;
            }
        }
        let dot: f64 = mean.iter().zip(&eflat).map(|(a, b)| a * b).sum();
        let nm: f64 = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ne: f64 = eflat.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(ne > 0.0 && nm > 0.0);
        let cosine = dot / (nm * ne);
        assert!(cosine > 0.95, "sampled mean misaligned: cosine {cosine}");
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let model = small_model(9);
        let table = toy_table();
        let item = toy_item(&model, &table);
        let before = model.flat_params();
        let config = TrainConfig {
            batch_size: 1,
            max_updates: 5,
            max_epochs: 10,
            learning_rate: 0.0,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        let out = train(model, &[item], &config, |_| (0.0, None)).unwrap();
        assert_eq!(out.model.flat_params(), before);
    }

    #[test]
    fn first_metrics_line_is_initial_loss() {
        let model = small_model(10);
        let table = toy_table();
        let item = toy_item(&model, &table);
        let init_loss = nll_loss(&model, &[item.clone()]).unwrap();
        let config = TrainConfig {
            batch_size: 1,
            max_updates: 3,
            max_epochs: 3,
            eval_interval: 1,
            ..TrainConfig::default()
        };
        let out = train(model, &[item], &config, |_| (0.0, None)).unwrap();
        assert_eq!(out.metrics[0].update, 0);
        assert!((out.metrics[0].train_loss - init_loss).abs() < 1e-12);
        // Loss should drop over a few updates on a single item.
        let last = out.metrics.last().unwrap();
        assert!(last.train_loss < init_loss);
    }

    #[test]
    fn metrics_reproducible_modulo_wall_time() {
        let table = toy_table();
        let run = || {
            let model = small_model(11);
            let item = toy_item(&model, &table);
            let config = TrainConfig {
                batch_size: 1,
                max_updates: 4,
                max_epochs: 4,
                eval_interval: 2,
                estimator: Estimator::SampledModel,
                seed: 5,
                ..TrainConfig::default()
            };
            let out = train(model, &[item], &config, |_| (0.5, Some(0.25))).unwrap();
            out.metrics
                .into_iter()
                .map(|m| (m.update, m.epoch, m.train_loss.to_bits(), m.train_top1.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn best_validation_checkpoint_is_kept() {
        let model = small_model(12);
        let table = toy_table();
        let item = toy_item(&model, &table);
        let config = TrainConfig {
            batch_size: 1,
            max_updates: 4,
            max_epochs: 4,
            eval_interval: 1,
            ..TrainConfig::default()
        };
        // Validation accuracy peaks at update 2 then degrades.
        let mut calls = 0;
        let out = train(model, &[item], &config, |_| {
            let acc = match calls {
                0 => 0.1,
                1 => 0.4,
                2 => 0.9,
                _ => 0.2,
            };
            calls += 1;
            (acc, Some(acc))
        })
        .unwrap();
        assert_eq!(out.best_update, 2);
    }
}
