//! Graph embeddings: synchronous message passing in the structure2vec
//! style, with hand-written reverse-mode gradients for the four parameter
//! matrices. Both molecules and patterns embed through the same fixed
//! feature mapping, so one embedder scores either kind of graph.
//!
//! Update rule per round:
//! `h_v <- act(theta1 x_v + theta2 sum_u h_u + theta3 sum_u act(theta4 x_uv))`
//! with the edge-message sum precomputed once (edge features are constant
//! across rounds). The graph embedding pools the final node embeddings.

pub mod container;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{BondOrder, Element, MolGraph};
use crate::pattern::{BondConstraint, PatternGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given pre-activation `x` and output `y = act(x)`.
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
    Max,
}

/// How the zeroth-round node state is formed: projected through `theta1`
/// (default) or the raw feature vector zero-padded to the embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Projected,
    RawPadded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub dim: usize,
    pub layers: usize,
    pub activation: Activation,
    pub pooling: Pooling,
    pub init: InitMode,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 256,
            layers: 3,
            activation: Activation::Relu,
            pooling: Pooling::Mean,
            init: InitMode::Projected,
        }
    }
}

/// Deterministic feature mapping from atoms/pattern nodes and bonds to
/// fixed-width vectors: element one-hot, clipped-charge one-hot, degree
/// one-hot, aromatic flag, wildcard flag; bond-order one-hot plus a
/// wildcard flag for pattern edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub elements: Vec<Element>,
    pub charge_min: i8,
    pub charge_max: i8,
    pub max_degree: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            elements: Element::ALL.to_vec(),
            charge_min: -2,
            charge_max: 2,
            max_degree: 5,
        }
    }
}

impl FeatureConfig {
    pub fn node_dim(&self) -> usize {
        self.elements.len() + (self.charge_max - self.charge_min + 1) as usize + self.max_degree + 1 + 2
    }

    pub fn edge_dim(&self) -> usize {
        5
    }

    fn node_feat(
        &self,
        element: Option<Element>,
        charge: Option<i8>,
        aromatic: bool,
        degree: usize,
    ) -> Vec<f64> {
        let mut x = vec![0.0; self.node_dim()];
        let mut off = 0;
        if let Some(e) = element {
            if let Some(i) = self.elements.iter().position(|&v| v == e) {
                x[off + i] = 1.0;
            }
        }
        off += self.elements.len();
        if let Some(c) = charge {
            let c = c.clamp(self.charge_min, self.charge_max);
            x[off + (c - self.charge_min) as usize] = 1.0;
        }
        off += (self.charge_max - self.charge_min + 1) as usize;
        x[off + degree.min(self.max_degree)] = 1.0;
        off += self.max_degree + 1;
        if aromatic {
            x[off] = 1.0;
        }
        if element.is_none() {
            x[off + 1] = 1.0;
        }
        x
    }

    fn edge_feat(&self, order: Option<BondOrder>) -> Vec<f64> {
        let mut x = vec![0.0; self.edge_dim()];
        match order {
            Some(o) => x[o.code() as usize - 1] = 1.0,
            None => x[4] = 1.0,
        }
        x
    }
}

/// A featurized graph ready for embedding; the common denominator of
/// molecules and patterns.
#[derive(Debug, Clone)]
pub struct FeatGraph {
    pub node_feats: Vec<Array1<f64>>,
    pub edge_feats: Vec<Array1<f64>>,
    /// Per node: (neighbor, incident edge index).
    pub adj: Vec<Vec<(usize, usize)>>,
}

impl FeatGraph {
    pub fn n(&self) -> usize {
        self.node_feats.len()
    }
}

pub fn featurize_molecule(cfg: &FeatureConfig, mol: &MolGraph) -> FeatGraph {
    let node_feats = (0..mol.n_atoms())
        .map(|v| {
            let a = mol.atom(v);
            Array1::from(cfg.node_feat(
                Some(a.element),
                Some(a.formal_charge),
                a.aromatic,
                mol.degree(v),
            ))
        })
        .collect();
    let edge_feats = mol
        .bonds()
        .iter()
        .map(|b| Array1::from(cfg.edge_feat(Some(b.order))))
        .collect();
    let adj = (0..mol.n_atoms())
        .map(|v| mol.neighbors(v).to_vec())
        .collect();
    FeatGraph {
        node_feats,
        edge_feats,
        adj,
    }
}

pub fn featurize_pattern(cfg: &FeatureConfig, p: &PatternGraph) -> FeatGraph {
    let node_feats = (0..p.n_nodes())
        .map(|v| {
            let n = p.node(v);
            Array1::from(cfg.node_feat(
                n.element,
                n.charge,
                n.aromatic == Some(true),
                p.degree(v),
            ))
        })
        .collect();
    let edge_feats = p
        .edges()
        .iter()
        .map(|e| {
            Array1::from(cfg.edge_feat(match e.constraint {
                BondConstraint::Order(o) => Some(o),
                BondConstraint::Any => None,
            }))
        })
        .collect();
    let adj = (0..p.n_nodes()).map(|v| p.neighbors(v).to_vec()).collect();
    FeatGraph {
        node_feats,
        edge_feats,
        adj,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbedError {
    #[error("cannot embed an empty graph")]
    EmptyGraph,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("raw-x0 init needs dim >= node feature dim")]
    RawInitTooNarrow,
}

/// One embedder: four parameter matrices plus its propagation config.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub theta1: Array2<f64>,
    pub theta2: Array2<f64>,
    pub theta3: Array2<f64>,
    pub theta4: Array2<f64>,
    pub config: EmbedConfig,
}

impl EmbedderParams {
    pub fn zeros(config: EmbedConfig, node_dim: usize, edge_dim: usize) -> EmbedderParams {
        let d = config.dim;
        EmbedderParams {
            theta1: Array2::zeros((d, node_dim)),
            theta2: Array2::zeros((d, d)),
            theta3: Array2::zeros((d, d)),
            theta4: Array2::zeros((d, edge_dim)),
            config,
        }
    }

    /// Uniform init in [-1/sqrt(d), 1/sqrt(d)].
    pub fn init<R: Rng>(
        config: EmbedConfig,
        node_dim: usize,
        edge_dim: usize,
        rng: &mut R,
    ) -> EmbedderParams {
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut fill = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
        };
        EmbedderParams {
            theta1: fill(d, node_dim),
            theta2: fill(d, d),
            theta3: fill(d, d),
            theta4: fill(d, edge_dim),
            config,
        }
    }

    pub fn node_dim(&self) -> usize {
        self.theta1.ncols()
    }

    pub fn edge_dim(&self) -> usize {
        self.theta4.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.theta1.len() + self.theta2.len() + self.theta3.len() + self.theta4.len()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.theta1.iter());
        out.extend(self.theta2.iter());
        out.extend(self.theta3.iter());
        out.extend(self.theta4.iter());
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter();
        for m in [&mut self.theta1, &mut self.theta2, &mut self.theta3, &mut self.theta4] {
            for slot in m.iter_mut() {
                *slot = *it.next().unwrap();
            }
        }
    }
}

/// Gradient accumulator shaped like one embedder's parameters.
#[derive(Debug, Clone)]
pub struct EmbedderGrads {
    pub theta1: Array2<f64>,
    pub theta2: Array2<f64>,
    pub theta3: Array2<f64>,
    pub theta4: Array2<f64>,
}

impl EmbedderGrads {
    pub fn zeros_like(p: &EmbedderParams) -> EmbedderGrads {
        EmbedderGrads {
            theta1: Array2::zeros(p.theta1.raw_dim()),
            theta2: Array2::zeros(p.theta2.raw_dim()),
            theta3: Array2::zeros(p.theta3.raw_dim()),
            theta4: Array2::zeros(p.theta4.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &EmbedderGrads) {
        self.theta1 += &other.theta1;
        self.theta2 += &other.theta2;
        self.theta3 += &other.theta3;
        self.theta4 += &other.theta4;
    }

    pub fn scale(&mut self, s: f64) {
        self.theta1 *= s;
        self.theta2 *= s;
        self.theta3 *= s;
        self.theta4 *= s;
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.theta1.iter());
        out.extend(self.theta2.iter());
        out.extend(self.theta3.iter());
        out.extend(self.theta4.iter());
    }

    pub fn sq_norm(&self) -> f64 {
        [&self.theta1, &self.theta2, &self.theta3, &self.theta4]
            .iter()
            .map(|m| m.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingResult {
    pub node_embeddings: Vec<Array1<f64>>,
    pub graph_embedding: Array1<f64>,
}

/// Upstream gradient entering the backward pass.
pub enum Upstream<'a> {
    /// d(loss)/d(graph_embedding)
    Graph(&'a Array1<f64>),
    /// d(loss)/d(h_v) per node
    PerNode(&'a [Array1<f64>]),
}

struct ForwardTrace {
    // h[l][v] and pre[l][v] for l = 0..=L; pre[0] unused in raw mode.
    h: Vec<Vec<Array1<f64>>>,
    pre: Vec<Vec<Array1<f64>>>,
    edge_pre: Vec<Array1<f64>>,
    edge_msg_sum: Vec<Array1<f64>>, // per node: theta3-input m_v
}

fn forward(p: &EmbedderParams, g: &FeatGraph) -> Result<(ForwardTrace, EmbeddingResult), EmbedError> {
    let n = g.n();
    if n == 0 {
        return Err(EmbedError::EmptyGraph);
    }
    if g.node_feats[0].len() != p.node_dim() {
        return Err(EmbedError::ShapeMismatch {
            expected: p.node_dim(),
            got: g.node_feats[0].len(),
        });
    }
    if !g.edge_feats.is_empty() && g.edge_feats[0].len() != p.edge_dim() {
        return Err(EmbedError::ShapeMismatch {
            expected: p.edge_dim(),
            got: g.edge_feats[0].len(),
        });
    }
    let d = p.config.dim;
    let act = p.config.activation;

    let edge_pre: Vec<Array1<f64>> = g.edge_feats.iter().map(|x| p.theta4.dot(x)).collect();
    let edge_msg: Vec<Array1<f64>> = edge_pre.iter().map(|z| z.mapv(|x| act.apply(x))).collect();
    let edge_msg_sum: Vec<Array1<f64>> = (0..n)
        .map(|v| {
            let mut s = Array1::zeros(d);
            for &(_, ei) in &g.adj[v] {
                s += &edge_msg[ei];
            }
            s
        })
        .collect();

    let mut h: Vec<Vec<Array1<f64>>> = Vec::with_capacity(p.config.layers + 1);
    let mut pre: Vec<Vec<Array1<f64>>> = Vec::with_capacity(p.config.layers + 1);
    let (h0, pre0) = match p.config.init {
        InitMode::Projected => {
            let pre0: Vec<Array1<f64>> = g.node_feats.iter().map(|x| p.theta1.dot(x)).collect();
            let h0 = pre0.iter().map(|z| z.mapv(|x| act.apply(x))).collect();
            (h0, pre0)
        }
        InitMode::RawPadded => {
            if d < g.node_feats[0].len() {
                return Err(EmbedError::RawInitTooNarrow);
            }
            let h0: Vec<Array1<f64>> = g
                .node_feats
                .iter()
                .map(|x| {
                    let mut v = Array1::zeros(d);
                    v.slice_mut(ndarray::s![..x.len()]).assign(x);
                    v
                })
                .collect();
            (h0, vec![Array1::zeros(0); n])
        }
    };
    h.push(h0);
    pre.push(pre0);

    for l in 0..p.config.layers {
        let mut pre_l = Vec::with_capacity(n);
        let mut h_l = Vec::with_capacity(n);
        for v in 0..n {
            let mut nbr_sum = Array1::zeros(d);
            for &(u, _) in &g.adj[v] {
                nbr_sum += &h[l][u];
            }
            let mut z = p.theta1.dot(&g.node_feats[v]);
            z += &p.theta2.dot(&nbr_sum);
            z += &p.theta3.dot(&edge_msg_sum[v]);
            h_l.push(z.mapv(|x| act.apply(x)));
            pre_l.push(z);
        }
        pre.push(pre_l);
        h.push(h_l);
    }

    let last = &h[p.config.layers];
    let graph_embedding = match p.config.pooling {
        Pooling::Mean => {
            let mut s = Array1::zeros(d);
            for hv in last {
                s += hv;
            }
            s / n as f64
        }
        Pooling::Sum => {
            let mut s = Array1::zeros(d);
            for hv in last {
                s += hv;
            }
            s
        }
        Pooling::Max => Array1::from_shape_fn(d, |i| {
            last.iter().map(|hv| hv[i]).fold(f64::NEG_INFINITY, f64::max)
        }),
    };
    let result = EmbeddingResult {
        node_embeddings: last.clone(),
        graph_embedding,
    };
    Ok((
        ForwardTrace {
            h,
            pre,
            edge_pre,
            edge_msg_sum,
        },
        result,
    ))
}

/// Forward pass: `layers` synchronous propagation rounds and a pooled
/// graph embedding.
pub fn embed(p: &EmbedderParams, g: &FeatGraph) -> Result<EmbeddingResult, EmbedError> {
    forward(p, g).map(|(_, r)| r)
}

/// Exact reverse-mode gradients of an upstream-weighted output with respect
/// to the four parameter matrices.
pub fn embed_with_gradient(
    p: &EmbedderParams,
    g: &FeatGraph,
    upstream: Upstream<'_>,
) -> Result<EmbedderGrads, EmbedError> {
    let (trace, result) = forward(p, g)?;
    let n = g.n();
    let d = p.config.dim;
    let act = p.config.activation;
    let layers = p.config.layers;

    // Seed node deltas from the pooling.
    let mut delta: Vec<Array1<f64>> = match upstream {
        Upstream::PerNode(list) => {
            if list.len() != n {
                return Err(EmbedError::ShapeMismatch {
                    expected: n,
                    got: list.len(),
                });
            }
            list.to_vec()
        }
        Upstream::Graph(gup) => {
            if gup.len() != d {
                return Err(EmbedError::ShapeMismatch {
                    expected: d,
                    got: gup.len(),
                });
            }
            match p.config.pooling {
                Pooling::Mean => vec![gup / n as f64; n],
                Pooling::Sum => vec![gup.clone(); n],
                Pooling::Max => {
                    let mut per = vec![Array1::zeros(d); n];
                    for i in 0..d {
                        let mut best = 0usize;
                        for v in 1..n {
                            if trace.h[layers][v][i] > trace.h[layers][best][i] {
                                best = v;
                            }
                        }
                        per[best][i] = gup[i];
                    }
                    per
                }
            }
        }
    };

    let mut grads = EmbedderGrads::zeros_like(p);
    let mut dmsum: Vec<Array1<f64>> = vec![Array1::zeros(d); n];

    for l in (1..=layers).rev() {
        let mut next_delta: Vec<Array1<f64>> = vec![Array1::zeros(d); n];
        for v in 0..n {
            let dpre = Array1::from_shape_fn(d, |i| {
                delta[v][i] * act.derivative(trace.pre[l][v][i], trace.h[l][v][i])
            });
            outer_acc(&mut grads.theta1, &dpre, &g.node_feats[v]);
            let mut nbr_sum = Array1::zeros(d);
            for &(u, _) in &g.adj[v] {
                nbr_sum += &trace.h[l - 1][u];
            }
            outer_acc(&mut grads.theta2, &dpre, &nbr_sum);
            outer_acc(&mut grads.theta3, &dpre, &trace.edge_msg_sum[v]);
            let back = p.theta2.t().dot(&dpre);
            for &(u, _) in &g.adj[v] {
                next_delta[u] += &back;
            }
            dmsum[v] += &p.theta3.t().dot(&dpre);
        }
        delta = next_delta;
    }

    if p.config.init == InitMode::Projected {
        for v in 0..n {
            let dpre = Array1::from_shape_fn(d, |i| {
                delta[v][i] * act.derivative(trace.pre[0][v][i], trace.h[0][v][i])
            });
            outer_acc(&mut grads.theta1, &dpre, &g.node_feats[v]);
        }
    }

    // Edge messages enter every round through theta3; fold the accumulated
    // m_v gradients back onto theta4 via each incident bond.
    for (ei, xe) in g.edge_feats.iter().enumerate() {
        let mut dmsg = Array1::zeros(d);
        let (a, b) = endpoint_nodes(g, ei);
        dmsg += &dmsum[a];
        dmsg += &dmsum[b];
        let e_out = trace.edge_pre[ei].mapv(|x| act.apply(x));
        let dpre = Array1::from_shape_fn(d, |i| {
            dmsg[i] * act.derivative(trace.edge_pre[ei][i], e_out[i])
        });
        outer_acc(&mut grads.theta4, &dpre, xe);
    }

    let _ = result;
    Ok(grads)
}

fn endpoint_nodes(g: &FeatGraph, edge: usize) -> (usize, usize) {
    let mut found = [usize::MAX; 2];
    let mut k = 0;
    for (v, nbrs) in g.adj.iter().enumerate() {
        if nbrs.iter().any(|&(_, ei)| ei == edge) {
            found[k] = v;
            k += 1;
            if k == 2 {
                break;
            }
        }
    }
    (found[0], found[1])
}

fn outer_acc(grad: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            grad.row_mut(i).scaled_add(ai, b);
        }
    }
}
