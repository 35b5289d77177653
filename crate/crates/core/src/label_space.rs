//! HOI vocabulary, consistency-graph node universe, and zero-shot splits.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::Candidate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelSpaceError {
    #[error("{0} list is empty")]
    Empty(&'static str),
    #[error("duplicate {kind} name {name:?}")]
    DuplicateName { kind: &'static str, name: String },
    #[error("hoi references unknown {kind} {name:?}")]
    Dangling { kind: &'static str, name: String },
    #[error("hoi ({action}, {object}) listed twice")]
    DuplicatePair { action: String, object: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("cannot hold out {k} with scenario {scenario}: {reason}")]
    Infeasible {
        scenario: Scenario,
        k: usize,
        reason: String,
    },
    #[error("split references hoi {0} outside the label space")]
    UnknownHoi(usize),
}

/// One `⟨human, action, object⟩` class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Hoi {
    pub action: usize,
    pub object: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Human,
    Action,
    Object,
    Interaction,
}

/// A node of the consistency graph, addressed by kind and ordinal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeId {
    pub const HUMAN: NodeId = NodeId {
        kind: NodeKind::Human,
        index: 0,
    };
}

/// Global node rows of one HOI class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HoiNodes {
    pub human: usize,
    pub object: usize,
    pub action: usize,
    pub interaction: usize,
}

/// Actions, objects, and the valid action-object pairs among them.
///
/// Node order is fixed: the human node, then actions, objects, and
/// interactions, each in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    actions: Vec<String>,
    objects: Vec<String>,
    hois: Vec<Hoi>,
    action_index: HashMap<String, usize>,
    object_index: HashMap<String, usize>,
    hoi_index: HashMap<Hoi, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct HoiEntry {
    action: String,
    object: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LabelSpaceFile {
    actions: Vec<String>,
    objects: Vec<String>,
    hois: Vec<HoiEntry>,
}

/// Lowercased word tokens of a label: `"Sit_on"` → `["sit", "on"]`.
pub fn tokenize(label: &str) -> Vec<String> {
    label
        .split(|c: char| c == '_' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn index_names(
    kind: &'static str,
    names: &[String],
) -> Result<HashMap<String, usize>, LabelSpaceError> {
    if names.is_empty() {
        return Err(LabelSpaceError::Empty(kind));
    }
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(LabelSpaceError::DuplicateName {
                kind,
                name: n.clone(),
            });
        }
    }
    Ok(map)
}

impl LabelSpace {
    pub fn build<S: AsRef<str>>(
        actions: &[S],
        objects: &[S],
        pairs: &[(S, S)],
    ) -> Result<Self, LabelSpaceError> {
        let actions: Vec<String> = actions.iter().map(|s| s.as_ref().to_owned()).collect();
        let objects: Vec<String> = objects.iter().map(|s| s.as_ref().to_owned()).collect();
        let action_index = index_names("action", &actions)?;
        let object_index = index_names("object", &objects)?;
        if pairs.is_empty() {
            return Err(LabelSpaceError::Empty("hoi"));
        }
        let mut hois = Vec::with_capacity(pairs.len());
        let mut hoi_index = HashMap::with_capacity(pairs.len());
        for (a, o) in pairs {
            let (a, o) = (a.as_ref(), o.as_ref());
            let action = *action_index
                .get(a)
                .ok_or_else(|| LabelSpaceError::Dangling {
                    kind: "action",
                    name: a.to_owned(),
                })?;
            let object = *object_index
                .get(o)
                .ok_or_else(|| LabelSpaceError::Dangling {
                    kind: "object",
                    name: o.to_owned(),
                })?;
            let hoi = Hoi { action, object };
            if hoi_index.insert(hoi, hois.len()).is_some() {
                return Err(LabelSpaceError::DuplicatePair {
                    action: a.to_owned(),
                    object: o.to_owned(),
                });
            }
            hois.push(hoi);
        }
        Ok(Self {
            actions,
            objects,
            hois,
            action_index,
            object_index,
            hoi_index,
        })
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn hois(&self) -> &[Hoi] {
        &self.hois
    }

    /// Number of HOI classes, `C`.
    pub fn num_classes(&self) -> usize {
        self.hois.len()
    }

    pub fn action_id(&self, name: &str) -> Option<usize> {
        self.action_index.get(name).copied()
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.object_index.get(name).copied()
    }

    pub fn hoi_id(&self, action: usize, object: usize) -> Option<usize> {
        self.hoi_index.get(&Hoi { action, object }).copied()
    }

    pub fn node_count(&self) -> usize {
        1 + self.actions.len() + self.objects.len() + self.hois.len()
    }

    pub fn kind_count(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Human => 1,
            NodeKind::Action => self.actions.len(),
            NodeKind::Object => self.objects.len(),
            NodeKind::Interaction => self.hois.len(),
        }
    }

    /// First global row of a node kind.
    pub fn kind_offset(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Human => 0,
            NodeKind::Action => 1,
            NodeKind::Object => 1 + self.actions.len(),
            NodeKind::Interaction => 1 + self.actions.len() + self.objects.len(),
        }
    }

    pub fn node_index(&self, node: NodeId) -> usize {
        debug_assert!(node.index < self.kind_count(node.kind));
        self.kind_offset(node.kind) + node.index
    }

    pub fn node_at(&self, row: usize) -> NodeId {
        let kinds = [
            NodeKind::Interaction,
            NodeKind::Object,
            NodeKind::Action,
            NodeKind::Human,
        ];
        for kind in kinds {
            let off = self.kind_offset(kind);
            if row >= off {
                return NodeId {
                    kind,
                    index: row - off,
                };
            }
        }
        unreachable!()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_count()).map(|r| self.node_at(r))
    }

    pub fn node_label(&self, node: NodeId) -> String {
        match node.kind {
            NodeKind::Human => "human".to_owned(),
            NodeKind::Action => self.actions[node.index].clone(),
            NodeKind::Object => self.objects[node.index].clone(),
            NodeKind::Interaction => {
                let h = self.hois[node.index];
                format!(
                    "human {} {}",
                    self.actions[h.action], self.objects[h.object]
                )
            }
        }
    }

    /// Word tokens whose embeddings are fused into the node's feature row.
    pub fn node_tokens(&self, node: NodeId) -> Vec<String> {
        match node.kind {
            NodeKind::Human => vec!["human".to_owned()],
            NodeKind::Action => tokenize(&self.actions[node.index]),
            NodeKind::Object => tokenize(&self.objects[node.index]),
            NodeKind::Interaction => {
                let h = self.hois[node.index];
                let mut t = vec!["human".to_owned()];
                t.extend(tokenize(&self.actions[h.action]));
                t.extend(tokenize(&self.objects[h.object]));
                t
            }
        }
    }

    pub fn hoi_nodes(&self, class: usize) -> HoiNodes {
        let h = self.hois[class];
        HoiNodes {
            human: 0,
            object: self.kind_offset(NodeKind::Object) + h.object,
            action: self.kind_offset(NodeKind::Action) + h.action,
            interaction: self.kind_offset(NodeKind::Interaction) + class,
        }
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let f: LabelSpaceFile = serde_json::from_str(text)?;
        let pairs: Vec<(String, String)> =
            f.hois.into_iter().map(|h| (h.action, h.object)).collect();
        Ok(Self::build(&f.actions, &f.objects, &pairs)?)
    }

    pub fn to_json(&self) -> String {
        let f = LabelSpaceFile {
            actions: self.actions.clone(),
            objects: self.objects.clone(),
            hois: self
                .hois
                .iter()
                .map(|h| HoiEntry {
                    action: self.actions[h.action].clone(),
                    object: self.objects[h.object].clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("serializable")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Unseen action-object combinations.
    #[serde(rename = "UC")]
    UnseenCombination,
    /// Unseen object categories.
    #[serde(rename = "UO")]
    UnseenObject,
    /// Unseen action categories.
    #[serde(rename = "UA")]
    UnseenAction,
    #[serde(rename = "full")]
    Full,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::UnseenCombination => "UC",
            Scenario::UnseenObject => "UO",
            Scenario::UnseenAction => "UA",
            Scenario::Full => "full",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "UC" | "uc" => Ok(Scenario::UnseenCombination),
            "UO" | "uo" => Ok(Scenario::UnseenObject),
            "UA" | "ua" => Ok(Scenario::UnseenAction),
            "full" | "FULL" => Ok(Scenario::Full),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

/// Which HOI classes are withheld from training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotSplit {
    pub scenario: Scenario,
    pub seed: u64,
    #[serde(rename = "unseen_hoi_ids")]
    pub unseen: BTreeSet<usize>,
}

/// Upper bound on rejection-sampling rounds for combination splits.
const MAX_SPLIT_ATTEMPTS: u64 = 10_000;

impl ZeroShotSplit {
    /// The split with every class seen.
    pub fn full() -> Self {
        Self {
            scenario: Scenario::Full,
            seed: 0,
            unseen: BTreeSet::new(),
        }
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.contains(&class)
    }

    pub fn seen(&self, space: &LabelSpace) -> Vec<usize> {
        (0..space.num_classes())
            .filter(|c| !self.unseen.contains(c))
            .collect()
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<(), SplitError> {
        match self.unseen.iter().find(|&&c| c >= space.num_classes()) {
            Some(&c) => Err(SplitError::UnknownHoi(c)),
            None => Ok(()),
        }
    }

    /// Actions that occur in no seen class.
    pub fn unseen_actions(&self, space: &LabelSpace) -> BTreeSet<usize> {
        let seen: HashSet<usize> = self
            .seen(space)
            .into_iter()
            .map(|c| space.hois()[c].action)
            .collect();
        (0..space.actions().len())
            .filter(|a| !seen.contains(a))
            .collect()
    }

    /// Objects that occur in no seen class.
    pub fn unseen_objects(&self, space: &LabelSpace) -> BTreeSet<usize> {
        let seen: HashSet<usize> = self
            .seen(space)
            .into_iter()
            .map(|c| space.hois()[c].object)
            .collect();
        (0..space.objects().len())
            .filter(|o| !seen.contains(o))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn used_actions(space: &LabelSpace, classes: impl Iterator<Item = usize>) -> HashSet<usize> {
    classes.map(|c| space.hois()[c].action).collect()
}

fn used_objects(space: &LabelSpace, classes: impl Iterator<Item = usize>) -> HashSet<usize> {
    classes.map(|c| space.hois()[c].object).collect()
}

/// Draws a zero-shot split.
///
/// * `UnseenCombination`: `k` unseen classes such that every action and object
///   still occurs in some seen class. Candidate draws are rejected and redrawn
///   from the next seed until the constraint holds.
/// * `UnseenObject` / `UnseenAction`: `k` held-out object or action categories;
///   every class containing one of them is unseen.
/// * `Full`: `k` must be 0.
///
/// The result depends only on `(space, scenario, k, seed)`.
pub fn make_zero_shot_split(
    space: &LabelSpace,
    scenario: Scenario,
    k: usize,
    seed: u64,
) -> Result<ZeroShotSplit, SplitError> {
    let infeasible = |reason: String| SplitError::Infeasible {
        scenario,
        k,
        reason,
    };
    let c = space.num_classes();
    let unseen: BTreeSet<usize> = match scenario {
        Scenario::Full => {
            if k != 0 {
                return Err(infeasible("the full scenario holds nothing out".into()));
            }
            BTreeSet::new()
        }
        Scenario::UnseenCombination => {
            if k == 0 {
                BTreeSet::new()
            } else {
                let all_actions = used_actions(space, 0..c).len();
                let all_objects = used_objects(space, 0..c).len();
                if k > c || c - k < all_actions.max(all_objects) {
                    return Err(infeasible(format!(
                        "{} seen classes cannot cover {all_actions} actions and {all_objects} objects",
                        c.saturating_sub(k)
                    )));
                }
                let mut found = None;
                for attempt in 0..MAX_SPLIT_ATTEMPTS {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
                    let draw: BTreeSet<usize> = sample(&mut rng, c, k).into_iter().collect();
                    let seen = (0..c).filter(|i| !draw.contains(i));
                    let seen: Vec<usize> = seen.collect();
                    if used_actions(space, seen.iter().copied()).len() == all_actions
                        && used_objects(space, seen.iter().copied()).len() == all_objects
                    {
                        found = Some(draw);
                        break;
                    }
                }
                found.ok_or_else(|| {
                    infeasible(format!(
                        "no draw in {MAX_SPLIT_ATTEMPTS} attempts kept every action and object seen"
                    ))
                })?
            }
        }
        Scenario::UnseenObject | Scenario::UnseenAction => {
            let n = if scenario == Scenario::UnseenObject {
                space.objects().len()
            } else {
                space.actions().len()
            };
            if k > n {
                return Err(infeasible(format!("only {n} categories exist")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let held: HashSet<usize> = sample(&mut rng, n, k).into_iter().collect();
            (0..c)
                .filter(|&i| {
                    let h = space.hois()[i];
                    let key = if scenario == Scenario::UnseenObject {
                        h.object
                    } else {
                        h.action
                    };
                    held.contains(&key)
                })
                .collect()
        }
    };
    Ok(ZeroShotSplit {
        scenario,
        seed,
        unseen,
    })
}

/// Drops every positive training sample that carries an unseen class label.
/// Negative samples are kept.
pub fn filter_training_corpus(corpus: &[Candidate], split: &ZeroShotSplit) -> Vec<Candidate> {
    corpus
        .iter()
        .filter(|c| match &c.labels {
            Some(l) if l.interactive => !l.hois.iter().any(|h| split.is_unseen(*h)),
            _ => true,
        })
        .cloned()
        .collect()
}
