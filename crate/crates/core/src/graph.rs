//! Consistency graph: compositional edges between each interaction and its
//! entities, plus top-ε cosine-consistency edges among same-kind nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    fuse_word_embedding, EmbeddingError, JointFeature, TokenWeights, WordVectorTable,
};
use crate::label_space::{LabelSpace, NodeKind};
use crate::numerics::Tensor;
use crate::par::{map_range, Exec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("zero vector in consistency")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("epsilon {eps} for {kind:?} nodes needs more than {population} nodes")]
    EpsilonTooLarge {
        kind: NodeKind,
        eps: usize,
        population: usize,
    },
    #[error("missing joint feature for node {0}")]
    MissingFeature(usize),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeTag {
    /// Interaction ↔ its human, action, and object nodes.
    Compositional,
    /// Object ↔ object.
    Functional,
    /// Action ↔ action.
    Behavioral,
    /// Interaction ↔ interaction.
    Interactional,
}

impl EdgeTag {
    fn for_kind(kind: NodeKind) -> Option<EdgeTag> {
        match kind {
            NodeKind::Action => Some(EdgeTag::Behavioral),
            NodeKind::Object => Some(EdgeTag::Functional),
            NodeKind::Interaction => Some(EdgeTag::Interactional),
            NodeKind::Human => None,
        }
    }
}

/// How many consistency neighbours each node of a kind selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epsilons {
    pub action: usize,
    pub object: usize,
    pub interaction: usize,
}

impl Default for Epsilons {
    fn default() -> Self {
        Self {
            action: 5,
            object: 5,
            interaction: 10,
        }
    }
}

impl Epsilons {
    pub fn uniform(eps: usize) -> Self {
        Self {
            action: eps,
            object: eps,
            interaction: eps,
        }
    }

    fn get(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Action => self.action,
            NodeKind::Object => self.object,
            NodeKind::Interaction => self.interaction,
            NodeKind::Human => 0,
        }
    }
}

/// Undirected graph over the node universe of a [`LabelSpace`].
///
/// Every adjacency list is sorted, contains the node itself, and is
/// mirrored by its neighbours' lists.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyGraph {
    kinds: Vec<NodeKind>,
    labels: Vec<String>,
    adjacency: Vec<Vec<usize>>,
    edges: BTreeMap<(usize, usize), EdgeTag>,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    kind: NodeKind,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeEntry>,
    edges: Vec<(usize, usize, EdgeTag)>,
}

/// Cosine of two joint features.
pub fn consistency(a: &[f64], b: &[f64]) -> Result<f64, GraphError> {
    if a.len() != b.len() {
        return Err(GraphError::Dimension(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(GraphError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Indices of the `eps` largest scores; ties go to the lower index.
fn top_eps(scores: &[(usize, f64)], eps: usize) -> Vec<usize> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    s.into_iter().take(eps).map(|(j, _)| j).collect()
}

impl ConsistencyGraph {
    fn empty(space: &LabelSpace) -> Self {
        let n = space.node_count();
        Self {
            kinds: space.nodes().map(|v| v.kind).collect(),
            labels: space.nodes().map(|v| space.node_label(v)).collect(),
            adjacency: (0..n).map(|i| vec![i]).collect(),
            edges: BTreeMap::new(),
        }
    }

    fn link(&mut self, i: usize, j: usize, tag: EdgeTag) {
        if i == j {
            return;
        }
        let key = (i.min(j), i.max(j));
        if self.edges.insert(key, tag).is_none() {
            self.adjacency[i].push(j);
            self.adjacency[j].push(i);
        }
    }

    fn finish(mut self) -> Self {
        for adj in &mut self.adjacency {
            adj.sort_unstable();
        }
        self
    }

    /// Only self-loops and the compositional edges.
    pub fn compositional(space: &LabelSpace) -> Self {
        let mut g = Self::empty(space);
        for c in 0..space.num_classes() {
            let n = space.hoi_nodes(c);
            g.link(n.interaction, n.human, EdgeTag::Compositional);
            g.link(n.interaction, n.action, EdgeTag::Compositional);
            g.link(n.interaction, n.object, EdgeTag::Compositional);
        }
        g.finish()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        self.kinds[node]
    }

    pub fn label(&self, node: usize) -> &str {
        &self.labels[node]
    }

    /// `N_i`: the node and its neighbours, sorted.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    /// Non-self edges as `(i, j, tag)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, EdgeTag)> + '_ {
        self.edges.iter().map(|(&(i, j), &t)| (i, j, t))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i == j || self.edges.contains_key(&(i.min(j), i.max(j)))
    }

    /// Row-major `N × N` membership mask of `N_i`, as consumed by attention.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.node_count();
        let mut m = vec![false; n * n];
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &j in adj {
                m[i * n + j] = true;
            }
        }
        m
    }

    pub fn to_json(&self) -> String {
        let f = GraphFile {
            nodes: self
                .kinds
                .iter()
                .zip(&self.labels)
                .map(|(&kind, label)| NodeEntry {
                    kind,
                    label: label.clone(),
                })
                .collect(),
            edges: self.edges().collect(),
        };
        serde_json::to_string(&f).expect("serializable")
    }

    /// Rebuilds a graph from its JSON export. Self-loops are implied.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let f: GraphFile = serde_json::from_str(text)?;
        let n = f.nodes.len();
        let mut g = Self {
            kinds: f.nodes.iter().map(|e| e.kind).collect(),
            labels: f.nodes.into_iter().map(|e| e.label).collect(),
            adjacency: (0..n).map(|i| vec![i]).collect(),
            edges: BTreeMap::new(),
        };
        for (i, j, tag) in f.edges {
            anyhow::ensure!(i < n && j < n, "edge ({i}, {j}) outside {n} nodes");
            g.link(i, j, tag);
        }
        Ok(g.finish())
    }
}

/// Builds the consistency graph from joint features of every action, object,
/// and interaction node (the order of `joint` does not matter).
///
/// Each node links to its `ε_k` most consistent same-kind peers; the directed
/// picks are symmetrized by union. The human node only carries compositional
/// edges.
pub fn build_graph(
    space: &LabelSpace,
    joint: &[JointFeature],
    eps: Epsilons,
    exec: Exec,
) -> Result<ConsistencyGraph, GraphError> {
    let mut z: Vec<Option<&[f64]>> = vec![None; space.node_count()];
    for j in joint {
        z[space.node_index(j.node)] = Some(&j.z);
    }
    let mut g = ConsistencyGraph::compositional(space);
    for kind in [NodeKind::Action, NodeKind::Object, NodeKind::Interaction] {
        let e = eps.get(kind);
        let population = space.kind_count(kind);
        if e == 0 {
            continue;
        }
        if e >= population {
            return Err(GraphError::EpsilonTooLarge {
                kind,
                eps: e,
                population,
            });
        }
        let off = space.kind_offset(kind);
        let feats: Vec<&[f64]> = (off..off + population)
            .map(|r| z[r].ok_or(GraphError::MissingFeature(r)))
            .collect::<Result<_, _>>()?;
        let picks = map_range(exec, population, |i| -> Result<Vec<usize>, GraphError> {
            let scores = (0..population)
                .filter(|&j| j != i)
                .map(|j| Ok((j, consistency(feats[i], feats[j])?)))
                .collect::<Result<Vec<_>, GraphError>>()?;
            Ok(top_eps(&scores, e))
        });
        let tag = EdgeTag::for_kind(kind).expect("same-kind edges");
        for (i, p) in picks.into_iter().enumerate() {
            for j in p? {
                g.link(off + i, off + j, tag);
            }
        }
    }
    Ok(g.finish())
}

/// `Z`: fused word embedding of every node label, in node order.
pub fn node_feature_matrix(
    space: &LabelSpace,
    table: &WordVectorTable,
    weights: Option<&TokenWeights>,
) -> Result<Tensor, GraphError> {
    let rows = space
        .nodes()
        .map(|v| fuse_word_embedding(table, &space.node_tokens(v), weights))
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::from_rows(&rows).map_err(|_| GraphError::Dimension(0, table.dim()))
}
