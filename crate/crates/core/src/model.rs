//! Full network: visual branch, semantic branch over the consistency graph,
//! and the similarity scoring that joins them.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gat::{GatConfig, GatStack, MlpStack};
use crate::graph::ConsistencyGraph;
use crate::label_space::LabelSpace;
use crate::numerics::{BatchMoments, ParamStore, Tape, Tensor, TensorError, Var};
use crate::pipeline::Candidate;
use crate::visual::{
    spatial_config, Dense, Mode, NormCtx, RunningStats, VisualConfig, VisualNet, SPATIAL_DIM,
};

/// Which network produces the class templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embedder {
    /// No templates: a learned `C`-way head on the concatenated visual
    /// embeddings.
    None,
    /// Per-node MLP over word embeddings, no message passing.
    Mlp,
    /// Graph attention over the consistency graph.
    Gat,
}

impl std::str::FromStr for Embedder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "mlp" => Ok(Self::Mlp),
            "gat" => Ok(Self::Gat),
            other => Err(format!(
                "unknown embedder {other:?} (expected none, mlp, or gat)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub semantic: GatConfig,
    pub embedder: Embedder,
    /// Width of word embeddings.
    pub d_e: usize,
    /// Scale applied to the summed cosines before the sigmoid.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual: VisualConfig::default(),
            semantic: GatConfig::default(),
            embedder: Embedder::Gat,
            d_e: 64,
            gamma: 8.0,
            seed: 0,
        }
    }
}

/// Graph-side inputs shared by training and inference.
#[derive(Clone, Debug)]
pub struct GraphContext {
    /// Node word-embedding rows, `N × d_e`.
    pub z: Tensor,
    /// Row-major `N × N` neighbourhood membership.
    pub mask: Vec<bool>,
    /// Node rows of each class's human, object, action, and interaction.
    rows: [Arc<[usize]>; 4],
}

impl GraphContext {
    pub fn new(
        space: &LabelSpace,
        graph: &ConsistencyGraph,
        z: Tensor,
    ) -> Result<Self, TensorError> {
        let n = space.node_count();
        if graph.node_count() != n || z.rows() != n {
            return Err(TensorError::Shape(format!(
                "{} label nodes, {} graph nodes, {} feature rows",
                n,
                graph.node_count(),
                z.rows()
            )));
        }
        let c = space.num_classes();
        let nodes: Vec<_> = (0..c).map(|i| space.hoi_nodes(i)).collect();
        let rows = [
            nodes.iter().map(|h| h.human).collect(),
            nodes.iter().map(|h| h.object).collect(),
            nodes.iter().map(|h| h.action).collect(),
            nodes.iter().map(|h| h.interaction).collect(),
        ];
        Ok(Self {
            z,
            mask: graph.mask(),
            rows,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.rows[0].len()
    }

    pub fn node_count(&self) -> usize {
        self.z.rows()
    }
}

#[derive(Clone, Debug)]
pub enum SemanticNet {
    Gat(GatStack),
    Mlp(MlpStack),
    Classifier(Dense),
}

/// Inputs of a batch of candidates as dense rows.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub a_h: Tensor,
    pub a_o: Tensor,
    pub spatial: Tensor,
}

impl BatchInputs {
    pub fn from_candidates<C: std::borrow::Borrow<Candidate>>(cands: &[C]) -> anyhow::Result<Self> {
        let mut a_h = Vec::with_capacity(cands.len());
        let mut a_o = Vec::with_capacity(cands.len());
        let mut sp = Vec::with_capacity(cands.len());
        for c in cands {
            let c = c.borrow();
            a_h.push(c.a_h.as_slice());
            a_o.push(c.a_o.as_slice());
            sp.push(spatial_config(&c.b_h, &c.b_o)?);
        }
        let spatial = if sp.is_empty() {
            Tensor::zeros(0, SPATIAL_DIM)
        } else {
            Tensor::from_rows(&sp)?
        };
        Ok(Self {
            a_h: Tensor::from_rows(&a_h)?,
            a_o: Tensor::from_rows(&a_o)?,
            spatial,
        })
    }

    pub fn len(&self) -> usize {
        self.a_h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles of one forward pass over a batch.
pub struct Forward {
    /// Interactiveness `φ_{h,o}`, `B × 1`.
    pub interactiveness: Var,
    /// Per-class scores `r`, `B × C`.
    pub class_scores: Var,
    /// Batch moments seen by each normalization layer (training mode only).
    pub observed: Vec<(usize, BatchMoments)>,
}

/// Class templates precomputed for inference: unit-norm rows for the
/// human, object, action, and interaction terms, each `C × d_v`.
#[derive(Clone, Debug)]
pub struct SemanticCache {
    templates: Option<[Tensor; 4]>,
}

impl SemanticCache {
    pub fn templates(&self) -> Option<&[Tensor; 4]> {
        self.templates.as_ref()
    }
}

/// Inference output for a batch of candidates.
#[derive(Clone, Debug)]
pub struct Scored {
    pub interactiveness: Vec<f64>,
    /// `B × C`.
    pub class_scores: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub params: ParamStore,
    pub visual: VisualNet,
    pub semantic: SemanticNet,
    pub running: Vec<RunningStats>,
}

enum Templates {
    Graph(Var),
    Fixed([Var; 4]),
    None,
}

impl Model {
    /// Freshly initialized network; identical configs give identical weights.
    pub fn new(config: ModelConfig, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let visual = VisualNet::new(&mut params, &config.visual, &mut rng);
        let semantic = match config.embedder {
            Embedder::Gat => SemanticNet::Gat(GatStack::new(
                &mut params,
                config.d_e,
                &config.semantic,
                &mut rng,
            )),
            Embedder::Mlp => SemanticNet::Mlp(MlpStack::new(
                &mut params,
                config.d_e,
                &config.semantic,
                &mut rng,
            )),
            Embedder::None => SemanticNet::Classifier(Dense::new(
                &mut params,
                "classifier",
                4 * config.visual.d_v,
                num_classes,
                &mut rng,
            )),
        };
        let running = visual.fresh_running_stats();
        Self {
            config,
            num_classes,
            params,
            visual,
            semantic,
            running,
        }
    }

    fn check_semantic_width(&self) -> Result<(), TensorError> {
        if !matches!(self.semantic, SemanticNet::Classifier(_))
            && self.config.semantic.out_dim != self.config.visual.d_v
        {
            return Err(TensorError::Shape(format!(
                "semantic width {} differs from visual width {}",
                self.config.semantic.out_dim, self.config.visual.d_v
            )));
        }
        Ok(())
    }

    /// `S`, `N × d_v`, or `None` for the classifier ablation.
    pub fn semantic_on_tape(
        &self,
        tape: &mut Tape,
        ctx: &GraphContext,
    ) -> Result<Option<Var>, TensorError> {
        self.check_semantic_width()?;
        match &self.semantic {
            SemanticNet::Classifier(_) => Ok(None),
            SemanticNet::Gat(stack) => {
                let z = tape.constant(ctx.z.clone())?;
                stack.forward(tape, z, &ctx.mask).map(Some)
            }
            SemanticNet::Mlp(stack) => {
                let z = tape.constant(ctx.z.clone())?;
                stack.forward(tape, z).map(Some)
            }
        }
    }

    pub fn semantic_embeddings(&self, ctx: &GraphContext) -> Result<Option<Tensor>, TensorError> {
        let mut tape = Tape::new(&self.params);
        Ok(self
            .semantic_on_tape(&mut tape, ctx)?
            .map(|s| tape.value(s).clone()))
    }

    pub fn cache(&self, ctx: &GraphContext) -> Result<SemanticCache, TensorError> {
        let mut tape = Tape::new(&self.params);
        let templates = match self.semantic_on_tape(&mut tape, ctx)? {
            None => None,
            Some(s) => {
                let t = graph_templates(&mut tape, s, ctx)?;
                Some(t.map(|v| tape.value(v).clone()))
            }
        };
        Ok(SemanticCache { templates })
    }

    fn forward_with(
        &self,
        tape: &mut Tape,
        batch: &BatchInputs,
        ctx: &GraphContext,
        mode: Mode,
        templates: Templates,
    ) -> Result<Forward, TensorError> {
        let mut norm = NormCtx::new(mode, &self.running, self.config.visual.bn_eps);
        let a_h = tape.constant(batch.a_h.clone())?;
        let a_o = tape.constant(batch.a_o.clone())?;
        let s = tape.constant(batch.spatial.clone())?;
        let out = self.visual.forward(tape, a_h, a_o, s, &mut norm)?;

        let [l0, l1, l2, l3] = out.logits;
        let sum = tape.add(l0, l1)?;
        let sum = tape.add(sum, l2)?;
        let sum = tape.add(sum, l3)?;
        let interactiveness = tape.sigmoid(sum)?;

        let logits = match (templates, &self.semantic) {
            (Templates::None, SemanticNet::Classifier(head)) => {
                let cat = tape.concat_cols(&out.embeddings)?;
                head.forward(tape, cat)?
            }
            (Templates::Graph(s), _) => {
                let t = graph_templates(tape, s, ctx)?;
                similarity_logits(tape, out.embeddings, t, self.config.gamma)?
            }
            (Templates::Fixed(t), _) => {
                similarity_logits(tape, out.embeddings, t, self.config.gamma)?
            }
            _ => {
                return Err(TensorError::Shape(
                    "templates do not match the semantic branch".into(),
                ))
            }
        };
        if tape.value(logits).cols() != ctx.num_classes() {
            return Err(TensorError::Shape(format!(
                "{} class scores for {} classes",
                tape.value(logits).cols(),
                ctx.num_classes()
            )));
        }
        let class_scores = tape.sigmoid(logits)?;
        Ok(Forward {
            interactiveness,
            class_scores,
            observed: norm.observed,
        })
    }

    /// End-to-end forward with the semantic branch recomputed on the tape, so
    /// gradients reach every parameter.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &BatchInputs,
        ctx: &GraphContext,
        mode: Mode,
    ) -> Result<Forward, TensorError> {
        let templates = match self.semantic_on_tape(tape, ctx)? {
            Some(s) => Templates::Graph(s),
            None => Templates::None,
        };
        self.forward_with(tape, batch, ctx, mode, templates)
    }

    /// Inference-mode scores for a batch of candidates against precomputed
    /// templates.
    pub fn infer<C: std::borrow::Borrow<Candidate>>(
        &self,
        cands: &[C],
        ctx: &GraphContext,
        cache: &SemanticCache,
    ) -> anyhow::Result<Scored> {
        let batch = BatchInputs::from_candidates(cands)?;
        let mut tape = Tape::new(&self.params);
        let templates = match &cache.templates {
            Some(t) => {
                let mut vars = Vec::with_capacity(4);
                for m in t {
                    vars.push(tape.constant(m.clone())?);
                }
                Templates::Fixed([vars[0], vars[1], vars[2], vars[3]])
            }
            None => Templates::None,
        };
        let f = self.forward_with(&mut tape, &batch, ctx, Mode::Eval, templates)?;
        Ok(Scored {
            interactiveness: tape.value(f.interactiveness).data().to_vec(),
            class_scores: tape.value(f.class_scores).clone(),
        })
    }

    /// Folds training-mode batch moments into the running statistics.
    pub fn absorb_moments(&mut self, observed: &[(usize, BatchMoments)], batch_len: usize) {
        let momentum = self.config.visual.bn_momentum;
        for (slot, m) in observed {
            self.running[*slot].update(m, batch_len, momentum);
        }
    }
}

/// Unit-norm class template rows gathered from `S`.
fn graph_templates(tape: &mut Tape, s: Var, ctx: &GraphContext) -> Result<[Var; 4], TensorError> {
    let sn = tape.row_l2_normalize(s)?;
    let mut t = Vec::with_capacity(4);
    for rows in &ctx.rows {
        t.push(tape.gather_rows(sn, rows.clone())?);
    }
    Ok([t[0], t[1], t[2], t[3]])
}

/// `γ Σ_k cos(v_k, s_k^i)` for every candidate row and class column.
fn similarity_logits(
    tape: &mut Tape,
    v: [Var; 4],
    templates: [Var; 4],
    gamma: f64,
) -> Result<Var, TensorError> {
    let mut acc: Option<Var> = None;
    for k in 0..4 {
        let vn = tape.row_l2_normalize(v[k])?;
        let cos = tape.matmul_t(vn, templates[k])?;
        acc = Some(match acc {
            None => cos,
            Some(a) => tape.add(a, cos)?,
        });
    }
    tape.scale(acc.expect("four terms"), gamma)
}
