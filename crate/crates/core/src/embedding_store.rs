//! Word vectors, visual feature records, and visual-semantic joint node
//! features.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::label_space::{LabelSpace, NodeId, NodeKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("token {0:?} has no word vector")]
    MissingToken(String),
    #[error("no tokens to fuse")]
    NoTokens,
    #[error("vector for {token:?} has dimension {got}, expected {expected}")]
    Dimension {
        token: String,
        expected: usize,
        got: usize,
    },
    #[error("vector for {0:?} is all zeros")]
    ZeroVector(String),
    #[error("label {0:?} has no feature records")]
    EmptyGroup(String),
    #[error("negative representation weight")]
    NegativeWeight,
    #[error("token weights for {0:?} sum to zero")]
    ZeroWeightSum(String),
    #[error("invalid feature record: {0}")]
    InvalidRecord(String),
}

/// Token → fixed-width embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WordVectorLine {
    token: String,
    vector: Vec<f64>,
}

impl WordVectorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        token: impl Into<String>,
        vector: Vec<f64>,
    ) -> Result<(), EmbeddingError> {
        let token = token.into();
        if self.vectors.is_empty() {
            self.dim = vector.len();
        } else if vector.len() != self.dim {
            return Err(EmbeddingError::Dimension {
                token,
                expected: self.dim,
                got: vector.len(),
            });
        }
        if vector.iter().all(|v| *v == 0.0) {
            return Err(EmbeddingError::ZeroVector(token));
        }
        self.vectors.insert(token, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> anyhow::Result<Self> {
        let mut table = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: WordVectorLine = serde_json::from_str(&line)
                .map_err(|e| anyhow::anyhow!("word vectors line {}: {e}", n + 1))?;
            table.insert(rec.token, rec.vector)?;
        }
        Ok(table)
    }

    /// Writes one line per token, sorted by token.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        for t in tokens {
            let line = WordVectorLine {
                token: t.clone(),
                vector: self.vectors[t].clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    }
}

/// Optional per-token weights for multi-word fusion; unlisted tokens weigh 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights(pub BTreeMap<String, f64>);

impl TokenWeights {
    pub fn weight(&self, token: &str) -> f64 {
        self.0.get(token).copied().unwrap_or(1.0)
    }
}

/// Weighted sum of token vectors, weights normalized to sum to one. With no
/// overrides this is the plain mean.
pub fn fuse_word_embedding<S: AsRef<str>>(
    table: &WordVectorTable,
    tokens: &[S],
    weights: Option<&TokenWeights>,
) -> Result<Vec<f64>, EmbeddingError> {
    if tokens.is_empty() {
        return Err(EmbeddingError::NoTokens);
    }
    let mut out = vec![0.0; table.dim()];
    let mut total = 0.0;
    for t in tokens {
        let t = t.as_ref();
        let v = table
            .get(t)
            .ok_or_else(|| EmbeddingError::MissingToken(t.to_owned()))?;
        let w = weights.map_or(1.0, |w| w.weight(t));
        total += w;
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    if total == 0.0 {
        let joined: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        return Err(EmbeddingError::ZeroWeightSum(joined.join(" ")));
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Human,
    Object,
}

/// One detected or annotated crop with its visual feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub kind: RecordKind,
    pub score: f64,
    pub feature: Vec<f64>,
}

impl FeatureRecord {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if !self.bbox.is_valid() {
            return Err(EmbeddingError::InvalidRecord(format!(
                "{}: degenerate box {:?}",
                self.image_id, self.bbox
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(EmbeddingError::InvalidRecord(format!(
                "{}: score {} outside [0, 1]",
                self.image_id, self.score
            )));
        }
        Ok(())
    }
}

pub fn read_records<R: BufRead>(reader: R) -> anyhow::Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line)
            .map_err(|e| anyhow::anyhow!("feature records line {}: {e}", n + 1))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(records: &[FeatureRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Elementwise mean of a non-empty group of features.
pub fn mean_feature(label: &str, group: &[&FeatureRecord]) -> Result<Vec<f64>, EmbeddingError> {
    let first = group
        .first()
        .ok_or_else(|| EmbeddingError::EmptyGroup(label.to_owned()))?;
    let dim = first.feature.len();
    let mut acc = vec![0.0; dim];
    for r in group {
        if r.feature.len() != dim {
            return Err(EmbeddingError::Dimension {
                token: label.to_owned(),
                expected: dim,
                got: r.feature.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(&r.feature) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|v| *v /= group.len() as f64);
    Ok(acc)
}

/// Universal visual representation per `(kind, label)`: the mean feature of
/// all records sharing it. Human crops carry action labels, object crops
/// carry object labels.
pub fn universal_visual_rep(
    records: &[FeatureRecord],
) -> Result<BTreeMap<(RecordKind, String), Vec<f64>>, EmbeddingError> {
    let mut groups: BTreeMap<(RecordKind, String), Vec<&FeatureRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.kind, r.label.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, group)| {
            let q = mean_feature(&key.1, &group)?;
            Ok((key, q))
        })
        .collect()
}

fn normalized(v: &[f64], what: &str) -> Result<Vec<f64>, EmbeddingError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(EmbeddingError::ZeroVector(what.to_owned()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `(ρ_v · q/‖q‖) ∥ (ρ_s · e/‖e‖)`
pub fn joint_feature(
    q: &[f64],
    e: &[f64],
    rho_v: f64,
    rho_s: f64,
) -> Result<Vec<f64>, EmbeddingError> {
    if rho_v < 0.0 || rho_s < 0.0 {
        return Err(EmbeddingError::NegativeWeight);
    }
    let mut z: Vec<f64> = normalized(q, "visual representation")?
        .into_iter()
        .map(|x| rho_v * x)
        .collect();
    z.extend(
        normalized(e, "word embedding")?
            .into_iter()
            .map(|x| rho_s * x),
    );
    Ok(z)
}

/// Joint feature with the visual half zeroed, for labels without records.
pub fn semantic_only_feature(
    visual_dim: usize,
    e: &[f64],
    rho_s: f64,
) -> Result<Vec<f64>, EmbeddingError> {
    if rho_s < 0.0 {
        return Err(EmbeddingError::NegativeWeight);
    }
    let mut z = vec![0.0; visual_dim];
    z.extend(
        normalized(e, "word embedding")?
            .into_iter()
            .map(|x| rho_s * x),
    );
    Ok(z)
}

/// Weights of the two halves of a joint feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointWeights {
    pub rho_v: f64,
    pub rho_s: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self {
            rho_v: 1.0,
            rho_s: 1.0,
        }
    }
}

/// Joint feature of a graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFeature {
    pub node: NodeId,
    pub z: Vec<f64>,
}

/// Builds `z` for every action, object, and interaction node, in node order.
///
/// An interaction's visual half is the concatenation of its action's and
/// object's universal representations. A constituent without records
/// contributes zeros; a node with no visual evidence at all keeps only its
/// semantic half.
pub fn node_joint_features(
    space: &LabelSpace,
    table: &WordVectorTable,
    token_weights: Option<&TokenWeights>,
    visual: &BTreeMap<(RecordKind, String), Vec<f64>>,
    weights: JointWeights,
) -> Result<Vec<JointFeature>, EmbeddingError> {
    let visual_dim = visual.values().next().map_or(0, Vec::len);
    let action_q = |a: usize| visual.get(&(RecordKind::Human, space.actions()[a].clone()));
    let object_q = |o: usize| visual.get(&(RecordKind::Object, space.objects()[o].clone()));

    let mut out = Vec::new();
    for node in space.nodes() {
        let q: Option<Vec<f64>> = match node.kind {
            NodeKind::Human => continue,
            NodeKind::Action => action_q(node.index).cloned(),
            NodeKind::Object => object_q(node.index).cloned(),
            NodeKind::Interaction => {
                let h = space.hois()[node.index];
                match (action_q(h.action), object_q(h.object)) {
                    (None, None) => None,
                    (a, o) => {
                        let zeros = vec![0.0; visual_dim];
                        let mut q = a.unwrap_or(&zeros).clone();
                        q.extend_from_slice(o.unwrap_or(&zeros));
                        Some(q)
                    }
                }
            }
        };
        let e = fuse_word_embedding(table, &space.node_tokens(node), token_weights)?;
        let width = if node.kind == NodeKind::Interaction {
            2 * visual_dim
        } else {
            visual_dim
        };
        let z = match q {
            Some(q) if q.iter().any(|v| *v != 0.0) => {
                joint_feature(&q, &e, weights.rho_v, weights.rho_s)?
            }
            _ => semantic_only_feature(width, &e, weights.rho_s)?,
        };
        out.push(JointFeature { node, z });
    }
    Ok(out)
}
