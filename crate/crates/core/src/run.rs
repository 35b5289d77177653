//! End-to-end experiment: split, graph, training, detection, evaluation.

use std::collections::BTreeSet;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    node_joint_features, universal_visual_rep, FeatureRecord, JointWeights,
};
use crate::eval::{
    evaluate, shuffle_scores, EvalReport, GroundTruthImage, SplitMode, RARE_THRESHOLD,
};
use crate::graph::{build_graph, node_feature_matrix, ConsistencyGraph, Epsilons};
use crate::label_space::{
    filter_training_corpus, make_zero_shot_split, LabelSpace, Scenario, ZeroShotSplit,
};
use crate::model::{GraphContext, Model, ModelConfig};
use crate::numerics::{grad_check, GradCheckReport, ParamStore, Tape};
use crate::par::Exec;
use crate::pipeline::{candidates_by_image, detect, Candidate, DetectConfig, Detection};
use crate::synth::Corpus;
use crate::train::{
    batch_loss, build_training_set, class_weights, positive_counts, train, LossRecord, TrainConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub eps: Epsilons,
    pub joint: JointWeights,
}

/// Which classes to withhold. `fraction` of the classes (UC) or of the
/// categories (UA/UO) is rounded to the nearest count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    pub scenario: Scenario,
    pub fraction: f64,
    pub seed: u64,
}

impl ZeroShotConfig {
    pub fn count(&self, space: &LabelSpace) -> usize {
        let n = match self.scenario {
            Scenario::UnseenCombination => space.num_classes(),
            Scenario::UnseenAction => space.actions().len(),
            Scenario::UnseenObject => space.objects().len(),
            Scenario::Full => 0,
        };
        (self.fraction * n as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub detect: DetectConfig,
    pub train: TrainConfig,
    pub zero_shot: Option<ZeroShotConfig>,
    pub rare_threshold: usize,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            detect: DetectConfig::default(),
            train: TrainConfig::default(),
            zero_shot: None,
            rare_threshold: RARE_THRESHOLD,
            exec: Exec::Parallel,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).context("run config")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Everything derived from the corpus before training.
pub struct Prepared {
    pub split: ZeroShotSplit,
    pub graph: ConsistencyGraph,
    pub ctx: GraphContext,
    pub samples: Vec<Candidate>,
    pub trained: Vec<bool>,
    pub test_images: Vec<(String, Vec<Candidate>)>,
}

/// Crops from images that show no withheld class; images annotated with an
/// unseen class contribute nothing to the label representations.
pub fn seen_crops(
    crops: &[FeatureRecord],
    gt: &[GroundTruthImage],
    split: &ZeroShotSplit,
) -> Vec<FeatureRecord> {
    let tainted: BTreeSet<&str> = gt
        .iter()
        .filter(|g| {
            g.pairs
                .iter()
                .any(|p| p.hoi_ids.iter().any(|&h| split.is_unseen(h)))
        })
        .map(|g| g.image_id.as_str())
        .collect();
    crops
        .iter()
        .filter(|c| !tainted.contains(c.image_id.as_str()))
        .cloned()
        .collect()
}

pub fn make_split(
    space: &LabelSpace,
    zs: Option<&ZeroShotConfig>,
) -> anyhow::Result<ZeroShotSplit> {
    Ok(match zs {
        None => ZeroShotSplit::full(),
        Some(z) => make_zero_shot_split(space, z.scenario, z.count(space), z.seed)?,
    })
}

pub fn prepare(corpus: &Corpus, cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let space = &corpus.space;
    anyhow::ensure!(
        corpus.words.dim() == cfg.model.d_e,
        "word vectors have width {}, the model expects {}",
        corpus.words.dim(),
        cfg.model.d_e
    );
    if let Some(r) = corpus.train_detections.first() {
        anyhow::ensure!(
            r.feature.len() == cfg.model.visual.d_a,
            "appearance features have width {}, the model expects {}",
            r.feature.len(),
            cfg.model.visual.d_a
        );
    }
    let split = make_split(space, cfg.zero_shot.as_ref())?;
    let crops = seen_crops(&corpus.train_crops, &corpus.train_gt, &split);
    let visual = universal_visual_rep(&crops)?;
    let joint = node_joint_features(space, &corpus.words, None, &visual, cfg.graph.joint)?;
    let graph = build_graph(space, &joint, cfg.graph.eps, cfg.exec)?;
    let z = node_feature_matrix(space, &corpus.words, None)?;
    let ctx = GraphContext::new(space, &graph, z)?;
    let all = build_training_set(
        &corpus.train_detections,
        &corpus.train_crops,
        &corpus.train_gt,
    )?;
    let samples = filter_training_corpus(&all, &split);
    let trained = (0..space.num_classes())
        .map(|c| !split.is_unseen(c))
        .collect();
    let test_images = candidates_by_image(&corpus.test_detections, &cfg.detect.candidates);
    Ok(Prepared {
        split,
        graph,
        ctx,
        samples,
        trained,
        test_images,
    })
}

pub struct Outcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
    /// The same detections with scores permuted.
    pub chance: EvalReport,
}

pub fn split_mode(prep: &Prepared, rare_threshold: usize) -> SplitMode {
    if prep.split.unseen.is_empty() {
        SplitMode::Rarity {
            train_positives: positive_counts(&prep.samples, prep.ctx.num_classes()),
            threshold: rare_threshold,
        }
    } else {
        SplitMode::ZeroShot {
            unseen: prep.split.unseen.clone(),
        }
    }
}

pub fn detect_and_evaluate(
    model: &Model,
    prep: &Prepared,
    gt: &[GroundTruthImage],
    cfg: &RunConfig,
) -> anyhow::Result<(Vec<Detection>, EvalReport, EvalReport)> {
    let cache = model.cache(&prep.ctx)?;
    let dets = detect(
        model,
        &prep.ctx,
        &cache,
        &prep.test_images,
        cfg.detect.theta_nis,
        cfg.exec,
    )?;
    let mode = split_mode(prep, cfg.rare_threshold);
    let c = prep.ctx.num_classes();
    let report = evaluate(&dets, gt, c, &mode, cfg.exec)?;
    let chance = evaluate(
        &shuffle_scores(&dets, cfg.train.seed),
        gt,
        c,
        &mode,
        cfg.exec,
    )?;
    Ok((dets, report, chance))
}

pub fn run_experiment(corpus: &Corpus, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let prep = prepare(corpus, cfg)?;
    let mut model = Model::new(cfg.model.clone(), corpus.space.num_classes());
    let history = train(
        &mut model,
        &prep.samples,
        &prep.ctx,
        &cfg.train,
        &prep.trained,
    )?;
    let (detections, report, chance) = detect_and_evaluate(&model, &prep, &corpus.test_gt, cfg)?;
    Ok(Outcome {
        model,
        history,
        detections,
        report,
        chance,
    })
}

/// First `n_pos` positives and `n_neg` negatives of the training samples.
pub fn toy_batch(
    samples: &[Candidate],
    n_pos: usize,
    n_neg: usize,
) -> anyhow::Result<Vec<&Candidate>> {
    let pos: Vec<&Candidate> = samples
        .iter()
        .filter(|s| s.is_positive())
        .take(n_pos)
        .collect();
    let neg: Vec<&Candidate> = samples
        .iter()
        .filter(|s| !s.is_positive())
        .take(n_neg)
        .collect();
    anyhow::ensure!(
        pos.len() == n_pos && neg.len() == n_neg,
        "need {n_pos} positive and {n_neg} negative samples, found {} and {}",
        pos.len(),
        neg.len()
    );
    Ok(pos.into_iter().chain(neg).collect())
}

/// Central-difference check of the full training loss on `batch` with respect
/// to every model parameter.
pub fn loss_grad_check(
    model: &mut Model,
    batch: &[&Candidate],
    prep: &Prepared,
    cfg: &TrainConfig,
    eps: f64,
) -> anyhow::Result<GradCheckReport> {
    let weights = class_weights(
        &prep.trained,
        &positive_counts(&prep.samples, prep.ctx.num_classes()),
        cfg.weighting,
    );
    let mut params = std::mem::replace(&mut model.params, ParamStore::new());
    let report = grad_check(&mut params, eps, |tape: &mut Tape| {
        Ok(batch_loss(tape, model, batch, &prep.ctx, &weights, cfg.eta)?.total)
    });
    model.params = params;
    Ok(report?)
}
