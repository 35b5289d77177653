//! Visual branch: spatial configuration, mapper blocks for single entities,
//! fusion blocks for human-object pairs, and the interactiveness fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, DegenerateBox};
use crate::numerics::{
    sigmoid, BatchMoments, NormStats, ParamId, ParamStore, Tape, Tensor, TensorError, Var,
};

pub const SPATIAL_DIM: usize = 8;

/// Both boxes relative to the origin of their union box, divided by the
/// union area: human `(x1, x2, y1, y2)` then object `(x1, x2, y1, y2)`.
pub fn spatial_config(b_h: &BBox, b_o: &BBox) -> Result<[f64; SPATIAL_DIM], DegenerateBox> {
    let u = b_h.union(b_o);
    let psi = u.area();
    if !(psi > 0.0) || !psi.is_finite() {
        return Err(DegenerateBox {
            x1: u.x1,
            y1: u.y1,
            x2: u.x2,
            y2: u.y2,
        });
    }
    let (dx, dy) = (u.x1, u.y1);
    let rel = |b: &BBox| {
        [
            (b.x1 - dx) / psi,
            (b.x2 - dx) / psi,
            (b.y1 - dy) / psi,
            (b.y2 - dy) / psi,
        ]
    };
    let (h, o) = (rel(b_h), rel(b_o));
    Ok([h[0], h[1], h[2], h[3], o[0], o[1], o[2], o[3]])
}

/// `φ_{h,o} = σ(φ_h + φ_o + φ_a + φ_t)` from the four block logits.
pub fn interactiveness(logits: [f64; 4]) -> f64 {
    sigmoid(logits.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualConfig {
    /// Width of candidate appearance features.
    pub d_a: usize,
    /// Width of the shared visual-semantic space.
    pub d_v: usize,
    pub mapper_hidden: usize,
    pub fusion_human: usize,
    pub fusion_object: usize,
    pub fusion_spatial: usize,
    pub fusion_trunk: usize,
    pub bn_eps: f64,
    /// Weight of the newest batch in the running normalization statistics.
    pub bn_momentum: f64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            d_a: 64,
            d_v: 1024,
            mapper_hidden: 1024,
            fusion_human: 512,
            fusion_object: 512,
            fusion_spatial: 256,
            fusion_trunk: 1024,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Running mean and variance of one normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// Exponential update with the unbiased variance of an `n`-row batch.
    pub fn update(&mut self, m: &BatchMoments, n: usize, momentum: f64) {
        let correction = if n > 1 {
            n as f64 / (n - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.mean.iter_mut().zip(&m.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&m.var) {
            *r = (1.0 - momentum) * *r + momentum * b * correction;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normalization state threaded through a forward pass. In training mode the
/// observed batch moments are collected for the caller to fold in after the
/// step.
pub struct NormCtx<'a> {
    pub mode: Mode,
    pub running: &'a [RunningStats],
    pub eps: f64,
    pub observed: Vec<(usize, BatchMoments)>,
}

impl<'a> NormCtx<'a> {
    pub fn new(mode: Mode, running: &'a [RunningStats], eps: f64) -> Self {
        Self {
            mode,
            running,
            eps,
            observed: Vec::new(),
        }
    }
}

/// Affine layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: params.add_glorot(format!("{name}.w"), d_in, d_out, rng),
            b: params.add(format!("{name}.b"), Tensor::zeros(1, d_out), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// `ReLU(BN(x W))`. The linear map carries no bias: normalization would
/// cancel it.
#[derive(Clone, Debug)]
pub struct NormedDense {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl NormedDense {
    fn new<R: Rng>(
        params: &mut ParamStore,
        slots: &mut Vec<usize>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let slot = slots.len();
        slots.push(d_out);
        Self {
            w: params.add_glorot(format!("{name}.w"), d_in, d_out, rng),
            gamma: params.add(
                format!("{name}.bn.gamma"),
                Tensor::filled(1, d_out, 1.0),
                false,
            ),
            beta: params.add(format!("{name}.bn.beta"), Tensor::zeros(1, d_out), false),
            slot,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, norm: &mut NormCtx) -> Result<Var, TensorError> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        let (gamma, beta) = (tape.param(self.gamma), tape.param(self.beta));
        let stats = match norm.mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => {
                let r = norm.running.get(self.slot).ok_or_else(|| {
                    TensorError::Shape(format!("no running statistics for slot {}", self.slot))
                })?;
                NormStats::Fixed {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                }
            }
        };
        let (y, moments) = tape.batch_norm(y, gamma, beta, &stats, norm.eps)?;
        if let Some(m) = moments {
            norm.observed.push((self.slot, m));
        }
        tape.relu(y)
    }
}

/// Scalar interactiveness logit and embedding heads on top of a hidden layer.
#[derive(Clone, Debug)]
pub struct Heads {
    pub logit: Dense,
    pub embed: Dense,
}

impl Heads {
    fn new<R: Rng>(
        params: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            logit: Dense::new(params, &format!("{name}.phi"), d_in, 1, rng),
            embed: Dense::new(params, &format!("{name}.embed"), d_in, d_v, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), TensorError> {
        Ok((self.logit.forward(tape, x)?, self.embed.forward(tape, x)?))
    }
}

/// Single-entity block: appearance feature to `(φ_k, v_k)`.
#[derive(Clone, Debug)]
pub struct MapperBlock {
    pub hidden: NormedDense,
    pub heads: Heads,
}

impl MapperBlock {
    pub fn forward(
        &self,
        tape: &mut Tape,
        a: Var,
        norm: &mut NormCtx,
    ) -> Result<(Var, Var), TensorError> {
        let h = self.hidden.forward(tape, a, norm)?;
        self.heads.forward(tape, h)
    }
}

/// Pair block: human feature, object feature, and spatial configuration to
/// `(φ_n, v_n)`.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub human: NormedDense,
    pub object: NormedDense,
    pub spatial: NormedDense,
    pub trunk: NormedDense,
    pub heads: Heads,
}

impl FusionBlock {
    pub fn forward(
        &self,
        tape: &mut Tape,
        a_h: Var,
        a_o: Var,
        s: Var,
        norm: &mut NormCtx,
    ) -> Result<(Var, Var), TensorError> {
        let h = self.human.forward(tape, a_h, norm)?;
        let o = self.object.forward(tape, a_o, norm)?;
        let sp = self.spatial.forward(tape, s, norm)?;
        let cat = tape.concat_cols(&[h, o, sp])?;
        let t = self.trunk.forward(tape, cat, norm)?;
        self.heads.forward(tape, t)
    }
}

/// Outputs for a batch, in the order human, object, action, interaction.
/// Logits are `B × 1`, embeddings `B × d_v`.
pub struct VisualOut {
    pub logits: [Var; 4],
    pub embeddings: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct VisualNet {
    pub human: MapperBlock,
    pub object: MapperBlock,
    pub action: FusionBlock,
    pub interaction: FusionBlock,
    /// Width of each normalization slot, indexed by [`NormedDense::slot`].
    pub norm_widths: Vec<usize>,
}

impl VisualNet {
    pub fn new<R: Rng>(params: &mut ParamStore, cfg: &VisualConfig, rng: &mut R) -> Self {
        let mut slots = Vec::new();
        let mapper = |params: &mut ParamStore, slots: &mut Vec<usize>, name: &str, rng: &mut R| {
            MapperBlock {
                hidden: NormedDense::new(
                    params,
                    slots,
                    &format!("{name}.hidden"),
                    cfg.d_a,
                    cfg.mapper_hidden,
                    rng,
                ),
                heads: Heads::new(params, name, cfg.mapper_hidden, cfg.d_v, rng),
            }
        };
        let human = mapper(params, &mut slots, "mapper_h", rng);
        let object = mapper(params, &mut slots, "mapper_o", rng);
        let fusion = |params: &mut ParamStore, slots: &mut Vec<usize>, name: &str, rng: &mut R| {
            let cat = cfg.fusion_human + cfg.fusion_object + cfg.fusion_spatial;
            FusionBlock {
                human: NormedDense::new(
                    params,
                    slots,
                    &format!("{name}.in_h"),
                    cfg.d_a,
                    cfg.fusion_human,
                    rng,
                ),
                object: NormedDense::new(
                    params,
                    slots,
                    &format!("{name}.in_o"),
                    cfg.d_a,
                    cfg.fusion_object,
                    rng,
                ),
                spatial: NormedDense::new(
                    params,
                    slots,
                    &format!("{name}.in_s"),
                    SPATIAL_DIM,
                    cfg.fusion_spatial,
                    rng,
                ),
                trunk: NormedDense::new(
                    params,
                    slots,
                    &format!("{name}.trunk"),
                    cat,
                    cfg.fusion_trunk,
                    rng,
                ),
                heads: Heads::new(params, name, cfg.fusion_trunk, cfg.d_v, rng),
            }
        };
        let action = fusion(params, &mut slots, "fusion_a", rng);
        let interaction = fusion(params, &mut slots, "fusion_t", rng);
        Self {
            human,
            object,
            action,
            interaction,
            norm_widths: slots,
        }
    }

    pub fn fresh_running_stats(&self) -> Vec<RunningStats> {
        self.norm_widths
            .iter()
            .map(|&w| RunningStats::new(w))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        a_h: Var,
        a_o: Var,
        s: Var,
        norm: &mut NormCtx,
    ) -> Result<VisualOut, TensorError> {
        let (ph, vh) = self.human.forward(tape, a_h, norm)?;
        let (po, vo) = self.object.forward(tape, a_o, norm)?;
        let (pa, va) = self.action.forward(tape, a_h, a_o, s, norm)?;
        let (pt, vt) = self.interaction.forward(tape, a_h, a_o, s, norm)?;
        Ok(VisualOut {
            logits: [ph, po, pa, pt],
            embeddings: [vh, vo, va, vt],
        })
    }
}
