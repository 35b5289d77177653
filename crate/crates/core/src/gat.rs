//! Multi-head graph attention stack and the per-node MLP used as its ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{ParamId, ParamStore, Tape, TensorError, Var};

/// Negative slope of the LeakyReLU inside the attention scoring network.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Widths of the semantic stack. Hidden layers concatenate `heads` outputs of
/// width `head_dim`; the last layer averages `heads` outputs of width `out_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub out_dim: usize,
    pub depth: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            head_dim: 128,
            out_dim: 1024,
            depth: 3,
        }
    }
}

impl GatConfig {
    /// Input width of layer `l` given the node feature width.
    fn layer_in(&self, l: usize, d_in: usize) -> usize {
        if l == 0 {
            d_in
        } else {
            self.heads * self.head_dim
        }
    }

    fn layer_out(&self, l: usize) -> usize {
        if l + 1 == self.depth {
            self.out_dim
        } else {
            self.head_dim
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Merge {
    Concat,
    Average,
}

/// One attention head: projection `W` and the two halves of the scoring
/// vector, applied to the target and neighbour projections respectively.
#[derive(Clone, Debug)]
pub struct GatHead {
    pub weight: ParamId,
    pub att_target: ParamId,
    pub att_neighbor: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatLayerParams {
    pub heads: Vec<GatHead>,
    pub merge: Merge,
}

impl GatLayerParams {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_head: usize,
        heads: usize,
        merge: Merge,
        rng: &mut R,
    ) -> Self {
        let heads = (0..heads)
            .map(|d| GatHead {
                weight: params.add_glorot(format!("{prefix}.head{d}.w"), d_in, d_head, rng),
                att_target: params.add_glorot(format!("{prefix}.head{d}.att_t"), d_head, 1, rng),
                att_neighbor: params.add_glorot(format!("{prefix}.head{d}.att_n"), d_head, 1, rng),
            })
            .collect();
        Self { heads, merge }
    }
}

fn head_projection(tape: &mut Tape, h: Var, head: &GatHead) -> Result<Var, TensorError> {
    let w = tape.param(head.weight);
    tape.matmul(h, w)
}

fn head_attention(
    tape: &mut Tape,
    wh: Var,
    head: &GatHead,
    mask: &[bool],
) -> Result<Var, TensorError> {
    let at = tape.param(head.att_target);
    let an = tape.param(head.att_neighbor);
    let ft = tape.matmul(wh, at)?;
    let fnb = tape.matmul(wh, an)?;
    let fnb = tape.transpose(fnb)?;
    let logits = tape.outer_add(ft, fnb)?;
    let logits = tape.leaky_relu(logits, ATTENTION_SLOPE)?;
    tape.masked_row_softmax(logits, mask)
}

/// Per-head `N × N` attention matrices. `mask` is the row-major membership
/// of `N_i` (see [`crate::graph::ConsistencyGraph::mask`]).
pub fn attention_coefficients(
    tape: &mut Tape,
    h: Var,
    mask: &[bool],
    layer: &GatLayerParams,
) -> Result<Vec<Var>, TensorError> {
    layer
        .heads
        .iter()
        .map(|head| {
            let wh = head_projection(tape, h, head)?;
            head_attention(tape, wh, head, mask)
        })
        .collect()
}

/// One attention layer: per head `τ(Σ_j μ_ij W h_j)` with ReLU `τ`, then the
/// heads are concatenated or averaged.
pub fn gat_layer_forward(
    tape: &mut Tape,
    h: Var,
    mask: &[bool],
    layer: &GatLayerParams,
) -> Result<Var, TensorError> {
    let mut outs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let wh = head_projection(tape, h, head)?;
        let mu = head_attention(tape, wh, head, mask)?;
        let agg = tape.matmul(mu, wh)?;
        outs.push(tape.relu(agg)?);
    }
    match layer.merge {
        Merge::Concat => tape.concat_cols(&outs),
        Merge::Average => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o)?;
            }
            tape.scale(acc, 1.0 / outs.len() as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatStack {
    pub layers: Vec<GatLayerParams>,
}

impl GatStack {
    pub fn new<R: Rng>(params: &mut ParamStore, d_in: usize, cfg: &GatConfig, rng: &mut R) -> Self {
        assert!(cfg.depth >= 1 && cfg.heads >= 1, "empty attention stack");
        let layers = (0..cfg.depth)
            .map(|l| {
                let merge = if l + 1 == cfg.depth {
                    Merge::Average
                } else {
                    Merge::Concat
                };
                GatLayerParams::new(
                    params,
                    &format!("gat.l{l}"),
                    cfg.layer_in(l, d_in),
                    cfg.layer_out(l),
                    cfg.heads,
                    merge,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    /// Node semantic embeddings `S` from node features `Z`.
    pub fn forward(&self, tape: &mut Tape, z: Var, mask: &[bool]) -> Result<Var, TensorError> {
        if self.layers.last().map(|l| l.merge) != Some(Merge::Average) {
            return Err(TensorError::Shape(
                "final attention layer must average its heads".into(),
            ));
        }
        let mut h = z;
        for layer in &self.layers {
            h = gat_layer_forward(tape, h, mask, layer)?;
        }
        Ok(h)
    }
}

/// Graph-free counterpart of [`GatStack`]: each layer is `τ(W h)` per node with
/// the same widths as the attention stack.
#[derive(Clone, Debug)]
pub struct MlpStack {
    pub layers: Vec<ParamId>,
}

impl MlpStack {
    pub fn new<R: Rng>(params: &mut ParamStore, d_in: usize, cfg: &GatConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.depth)
            .map(|l| {
                let out = if l + 1 == cfg.depth {
                    cfg.out_dim
                } else {
                    cfg.heads * cfg.head_dim
                };
                params.add_glorot(format!("mlp.l{l}.w"), cfg.layer_in(l, d_in), out, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
        let mut h = z;
        for &w in &self.layers {
            let w = tape.param(w);
            let x = tape.matmul(h, w)?;
            h = tape.relu(x)?;
        }
        Ok(h)
    }
}
