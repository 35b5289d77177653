//! Losses, learning-rate schedule, sampling, and the SGD loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{FeatureRecord, RecordKind};
use crate::eval::GroundTruthImage;
use crate::geometry::iou;
use crate::model::{BatchInputs, GraphContext, Model};
use crate::numerics::{bce, Gradients, ParamStore, Tape, Tensor, TensorError, Var};
use crate::pipeline::{candidates_by_image, Candidate, CandidateLabels, CandidateParams};
use crate::visual::Mode;

/// Minimum IoU of both boxes with an annotated pair for a training positive.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    Uniform,
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_start_lr: f64,
    pub warmup_iters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub positives_per_batch: usize,
    /// Weight of the classification loss.
    pub eta: f64,
    pub weighting: ClassWeighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_start_lr: 0.001,
            warmup_iters: 500,
            epochs: 5,
            batch_size: 64,
            positives_per_batch: 16,
            eta: 1.0,
            weighting: ClassWeighting::Uniform,
            seed: 0,
        }
    }
}

/// Learning rate at `step` of a run with `total` steps: linear warm-up to
/// `lr0`, then cosine annealing to zero at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_iters;
    if step < w {
        return cfg.warmup_start_lr + (cfg.lr0 - cfg.warmup_start_lr) * step as f64 / w as f64;
    }
    if total <= w {
        return cfg.lr0;
    }
    let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
    cfg.lr0 * 0.5 * (1.0 + (PI * progress).cos())
}

/// Binary cross-entropy of the interactiveness of one candidate.
pub fn interactiveness_loss(phi: f64, u: f64) -> f64 {
    bce(phi, u)
}

/// Mean per-class binary cross-entropy of one candidate's class scores.
pub fn classification_loss(r: &[f64], y: &[f64]) -> f64 {
    assert_eq!(r.len(), y.len(), "score and label widths differ");
    r.iter().zip(y).map(|(&p, &t)| bce(p, t)).sum::<f64>() / r.len() as f64
}

pub fn total_loss(l_i: f64, l_c: f64, eta: f64) -> f64 {
    l_i + eta * l_c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub interactiveness: f64,
    pub classification: f64,
    pub total: f64,
}

/// Per-class weights of the classification loss. Classes outside the training
/// label set weigh zero; the rest sum to one.
pub fn class_weights(trained: &[bool], positives: &[usize], mode: ClassWeighting) -> Vec<f64> {
    let raw: Vec<f64> = trained
        .iter()
        .zip(positives)
        .map(|(&t, &n)| match (t, mode) {
            (false, _) => 0.0,
            (true, ClassWeighting::Uniform) => 1.0,
            (true, ClassWeighting::InverseFrequency) => 1.0 / n.max(1) as f64,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return raw;
    }
    raw.into_iter().map(|w| w / total).collect()
}

/// Positive count of every class among labeled candidates.
pub fn positive_counts(samples: &[Candidate], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in samples {
        if let Some(l) = &s.labels {
            if l.interactive {
                for &h in &l.hois {
                    if h < num_classes {
                        counts[h] += 1;
                    }
                }
            }
        }
    }
    counts
}

/// Tape handles of the three loss terms.
pub struct LossVars {
    pub interactiveness: Var,
    pub classification: Var,
    pub total: Var,
    pub observed: Vec<(usize, crate::numerics::BatchMoments)>,
}

/// `L = L_i + η L_c` over a labeled batch. `L_i` averages over all samples;
/// `L_c` averages over positives only, each weighted by `weights` across
/// classes.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[&Candidate],
    ctx: &GraphContext,
    weights: &[f64],
    eta: f64,
) -> Result<LossVars, TensorError> {
    let c = ctx.num_classes();
    if weights.len() != c {
        return Err(TensorError::Shape(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    let n = batch.len();
    let n_pos = batch.iter().filter(|s| s.is_positive()).count();
    let mut u = Tensor::zeros(n, 1);
    let mut y = Tensor::zeros(n, c);
    let mut w = Tensor::zeros(n, c);
    for (b, s) in batch.iter().enumerate() {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| TensorError::Shape("unlabeled training sample".into()))?;
        if labels.interactive {
            u.set(b, 0, 1.0);
            for &h in &labels.hois {
                if h >= c {
                    return Err(TensorError::Shape(format!("label {h} outside {c} classes")));
                }
                y.set(b, h, 1.0);
            }
            for k in 0..c {
                w.set(b, k, weights[k] / n_pos as f64);
            }
        }
    }
    let inputs =
        BatchInputs::from_candidates(batch).map_err(|e| TensorError::Shape(e.to_string()))?;
    let f = model.forward(tape, &inputs, ctx, Mode::Train)?;
    let li = tape.bce(
        f.interactiveness,
        Arc::new(u),
        Arc::new(Tensor::filled(n, 1, 1.0 / n as f64)),
    )?;
    let lc = tape.bce(f.class_scores, Arc::new(y), Arc::new(w))?;
    let scaled = tape.scale(lc, eta)?;
    let total = tape.add(li, scaled)?;
    Ok(LossVars {
        interactiveness: li,
        classification: lc,
        total,
        observed: f.observed,
    })
}

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `v ← μ v + g + λ p`, `p ← p − lr · v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).rows(), params.get(id).cols()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let decay = if params.decays(id) {
                self.weight_decay
            } else {
                0.0
            };
            let g = grads.get(id).data();
            let v = self.velocity[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                v[k] = self.momentum * v[k] + g[k] + decay * p[k];
                p[k] -= lr * v[k];
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no positive training samples")]
    NoPositives,
    #[error("batch of {batch} cannot hold {positives} positives")]
    BatchComposition { batch: usize, positives: usize },
    #[error("training diverged at step {step}: {source}")]
    Diverged { step: usize, source: TensorError },
}

/// Steps in one epoch: enough batches to visit every positive once.
pub fn steps_per_epoch(n_pos: usize, cfg: &TrainConfig) -> usize {
    n_pos.div_ceil(cfg.positives_per_batch.max(1))
}

/// Trains `model` in place and returns the per-step loss history.
///
/// Each epoch reshuffles positives and negatives with a seeded generator;
/// every batch holds `positives_per_batch` positives and fills the rest with
/// negatives, cycling through either pool when it runs short.
pub fn train(
    model: &mut Model,
    samples: &[Candidate],
    ctx: &GraphContext,
    cfg: &TrainConfig,
    trained_classes: &[bool],
) -> Result<Vec<LossRecord>, TrainError> {
    if cfg.positives_per_batch > cfg.batch_size || cfg.positives_per_batch == 0 {
        return Err(TrainError::BatchComposition {
            batch: cfg.batch_size,
            positives: cfg.positives_per_batch,
        });
    }
    let pos: Vec<&Candidate> = samples.iter().filter(|s| s.is_positive()).collect();
    let neg: Vec<&Candidate> = samples.iter().filter(|s| !s.is_positive()).collect();
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if pos.is_empty() {
        return Err(TrainError::NoPositives);
    }
    let weights = class_weights(
        trained_classes,
        &positive_counts(samples, ctx.num_classes()),
        cfg.weighting,
    );
    let per_epoch = steps_per_epoch(pos.len(), cfg);
    let total = per_epoch * cfg.epochs;
    let n_neg = if neg.is_empty() {
        0
    } else {
        cfg.batch_size - cfg.positives_per_batch
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut p_order: Vec<usize> = (0..pos.len()).collect();
        let mut n_order: Vec<usize> = (0..neg.len()).collect();
        p_order.shuffle(&mut rng);
        n_order.shuffle(&mut rng);
        let (mut pi, mut ni) = (0, 0);
        for _ in 0..per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.positives_per_batch {
                batch.push(pos[p_order[pi % pos.len()]]);
                pi += 1;
            }
            for _ in 0..n_neg {
                batch.push(neg[n_order[ni % neg.len()]]);
                ni += 1;
            }
            let lr = lr_at(step, total, cfg);
            let diverged = |source| TrainError::Diverged { step, source };
            let (record, grads, observed) = {
                let mut tape = Tape::new(&model.params);
                let loss = batch_loss(&mut tape, model, &batch, ctx, &weights, cfg.eta)
                    .map_err(diverged)?;
                let grads = tape.backward(loss.total).map_err(diverged)?;
                let value = |v: Var| tape.value(v).data()[0];
                let record = LossRecord {
                    step,
                    lr,
                    interactiveness: value(loss.interactiveness),
                    classification: value(loss.classification),
                    total: value(loss.total),
                };
                (record, grads, loss.observed)
            };
            if !record.total.is_finite() {
                return Err(diverged(TensorError::NonFinite("loss")));
            }
            sgd.step(&mut model.params, &grads, lr);
            model.absorb_moments(&observed, batch.len());
            history.push(record);
            step += 1;
        }
    }
    Ok(history)
}

/// Labels detection-derived candidates against the annotations: a candidate
/// is positive when both boxes reach [`POSITIVE_IOU`] with some annotated
/// pair, and it takes the classes of every such pair.
pub fn label_candidates(cands: &mut [Candidate], gt: &GroundTruthImage) -> anyhow::Result<()> {
    for c in cands.iter_mut() {
        let mut hois = Vec::new();
        for p in &gt.pairs {
            if iou(&c.b_h, &p.b_h)? >= POSITIVE_IOU && iou(&c.b_o, &p.b_o)? >= POSITIVE_IOU {
                hois.extend_from_slice(&p.hoi_ids);
            }
        }
        hois.sort_unstable();
        hois.dedup();
        c.labels = Some(CandidateLabels {
            interactive: !hois.is_empty(),
            hois,
        });
    }
    Ok(())
}

/// Annotated pairs as positive candidates, with features looked up from the
/// annotated crops of the same image and box.
pub fn ground_truth_candidates(
    gt: &[GroundTruthImage],
    crops: &[FeatureRecord],
) -> anyhow::Result<Vec<Candidate>> {
    let mut index: BTreeMap<(&str, RecordKind, [u64; 4]), &FeatureRecord> = BTreeMap::new();
    let key = |b: &crate::geometry::BBox| b.to_array().map(f64::to_bits);
    for r in crops {
        index
            .entry((r.image_id.as_str(), r.kind, key(&r.bbox)))
            .or_insert(r);
    }
    let mut out = Vec::new();
    for img in gt {
        for p in &img.pairs {
            let find = |kind, b| {
                index
                    .get(&(img.image_id.as_str(), kind, key(b)))
                    .ok_or_else(|| {
                        anyhow::anyhow!(
                            "image {}: no {kind:?} crop for annotated box {:?}",
                            img.image_id,
                            b
                        )
                    })
            };
            let h = find(RecordKind::Human, &p.b_h)?;
            let o = find(RecordKind::Object, &p.b_o)?;
            let mut hois = p.hoi_ids.clone();
            hois.sort_unstable();
            hois.dedup();
            out.push(Candidate {
                image_id: img.image_id.clone(),
                b_h: p.b_h,
                b_o: p.b_o,
                c_h: 1.0,
                c_o: 1.0,
                a_h: h.feature.clone(),
                a_o: o.feature.clone(),
                labels: Some(CandidateLabels {
                    interactive: true,
                    hois,
                }),
            });
        }
    }
    Ok(out)
}

/// Training samples: labeled detection pairs (threshold 0.1, uncapped) plus
/// every annotated pair.
pub fn build_training_set(
    detections: &[FeatureRecord],
    crops: &[FeatureRecord],
    gt: &[GroundTruthImage],
) -> anyhow::Result<Vec<Candidate>> {
    let by_id: BTreeMap<&str, &GroundTruthImage> =
        gt.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let empty = GroundTruthImage {
        image_id: String::new(),
        pairs: Vec::new(),
    };
    let mut out = Vec::new();
    for (id, mut cands) in candidates_by_image(detections, &CandidateParams::training()) {
        label_candidates(
            &mut cands,
            by_id.get(id.as_str()).copied().unwrap_or(&empty),
        )?;
        out.extend(cands);
    }
    out.extend(ground_truth_candidates(gt, crops)?);
    Ok(out)
}
