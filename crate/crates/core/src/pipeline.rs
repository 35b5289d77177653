//! Candidate generation, non-interactive suppression, and per-class scoring
//! of human-object pairs.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::embedding_store::{FeatureRecord, RecordKind};
use crate::geometry::BBox;
use crate::model::{GraphContext, Model, SemanticCache};
use crate::numerics::sigmoid;
use crate::par::{try_map_range, Exec};

/// Training supervision attached to a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateLabels {
    pub interactive: bool,
    /// Classes of the matched annotated pair(s); empty for negatives.
    pub hois: Vec<usize>,
}

/// A human-object pair proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub image_id: String,
    pub b_h: BBox,
    pub b_o: BBox,
    pub c_h: f64,
    pub c_o: f64,
    pub a_h: Vec<f64>,
    pub a_o: Vec<f64>,
    pub labels: Option<CandidateLabels>,
}

impl Candidate {
    pub fn is_positive(&self) -> bool {
        self.labels.as_ref().is_some_and(|l| l.interactive)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub b_h: BBox,
    pub b_o: BBox,
    pub hoi: usize,
    pub score: f64,
}

/// Detector-output filtering before pairing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateParams {
    pub theta_h: f64,
    pub n_h: usize,
    pub theta_o: f64,
    pub n_o: usize,
}

impl Default for CandidateParams {
    fn default() -> Self {
        Self {
            theta_h: 0.5,
            n_h: 10,
            theta_o: 0.1,
            n_o: 20,
        }
    }
}

impl CandidateParams {
    /// All detections above 0.1, uncapped.
    pub fn training() -> Self {
        Self {
            theta_h: 0.1,
            n_h: usize::MAX,
            theta_o: 0.1,
            n_o: usize::MAX,
        }
    }
}

fn keep_top<'a>(dets: &[&'a FeatureRecord], theta: f64, n: usize) -> Vec<&'a FeatureRecord> {
    let mut kept: Vec<&FeatureRecord> = dets.iter().copied().filter(|d| d.score > theta).collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(n);
    kept
}

/// Pairs every surviving human with every surviving object of one image.
///
/// Detections are kept when their score exceeds the threshold, then capped
/// to the top `N` by score (stable for equal scores).
pub fn generate_candidates(
    humans: &[&FeatureRecord],
    objects: &[&FeatureRecord],
    params: &CandidateParams,
) -> Vec<Candidate> {
    let hs = keep_top(humans, params.theta_h, params.n_h);
    let os = keep_top(objects, params.theta_o, params.n_o);
    let mut out = Vec::with_capacity(hs.len() * os.len());
    for h in &hs {
        for o in &os {
            out.push(Candidate {
                image_id: h.image_id.clone(),
                b_h: h.bbox,
                b_o: o.bbox,
                c_h: h.score,
                c_o: o.score,
                a_h: h.feature.clone(),
                a_o: o.feature.clone(),
                labels: None,
            });
        }
    }
    out
}

/// Candidates of every image in a detection file, grouped by image id in
/// sorted order.
pub fn candidates_by_image(
    records: &[FeatureRecord],
    params: &CandidateParams,
) -> Vec<(String, Vec<Candidate>)> {
    let mut groups: BTreeMap<&str, (Vec<&FeatureRecord>, Vec<&FeatureRecord>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.image_id.as_str()).or_default();
        match r.kind {
            RecordKind::Human => g.0.push(r),
            RecordKind::Object => g.1.push(r),
        }
    }
    groups
        .into_iter()
        .map(|(id, (h, o))| (id.to_owned(), generate_candidates(&h, &o, params)))
        .collect()
}

/// Indices of candidates whose interactiveness reaches `theta`.
pub fn nis_filter(interactiveness: &[f64], theta: f64) -> Vec<usize> {
    interactiveness
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= theta)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("zero-norm vector in classification score")]
pub struct ZeroNorm;

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ZeroNorm> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(ZeroNorm);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// `σ(γ Σ_k cos(v_k, s_k))` over human, object, action, and interaction.
pub fn classification_score(v: [&[f64]; 4], s: [&[f64]; 4], gamma: f64) -> Result<f64, ZeroNorm> {
    let mut total = 0.0;
    for k in 0..4 {
        total += cosine(v[k], s[k])?;
    }
    Ok(sigmoid(gamma * total))
}

/// Final pair-class confidence: class score, interactiveness, and both
/// detector confidences multiplied.
pub fn detection_confidence(r: f64, phi: f64, c_h: f64, c_o: f64) -> f64 {
    r * phi * c_h * c_o
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub candidates: CandidateParams,
    /// Interactiveness threshold of the suppression stage.
    pub theta_nis: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            candidates: CandidateParams::default(),
            theta_nis: 0.1,
        }
    }
}

/// Scores one image's candidates against every class.
pub fn detect_image(
    model: &Model,
    ctx: &GraphContext,
    cache: &SemanticCache,
    candidates: &[Candidate],
    theta_nis: f64,
) -> anyhow::Result<Vec<Detection>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let scored = model.infer(candidates, ctx, cache)?;
    let keep = nis_filter(&scored.interactiveness, theta_nis);
    let mut out = Vec::with_capacity(keep.len() * ctx.num_classes());
    for i in keep {
        let c = &candidates[i];
        let phi = scored.interactiveness[i];
        for (hoi, &r) in scored.class_scores.row(i).iter().enumerate() {
            out.push(Detection {
                image_id: c.image_id.clone(),
                b_h: c.b_h,
                b_o: c.b_o,
                hoi,
                score: detection_confidence(r, phi, c.c_h, c.c_o),
            });
        }
    }
    Ok(out)
}

/// Runs [`detect_image`] over every image; output is in image order.
pub fn detect(
    model: &Model,
    ctx: &GraphContext,
    cache: &SemanticCache,
    images: &[(String, Vec<Candidate>)],
    theta_nis: f64,
    exec: Exec,
) -> anyhow::Result<Vec<Detection>> {
    let per_image = try_map_range(exec, images.len(), |i| {
        detect_image(model, ctx, cache, &images[i].1, theta_nis)
    })?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn read_detections<R: BufRead>(reader: R) -> anyhow::Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line)
            .map_err(|e| anyhow::anyhow!("detections line {}: {e}", n + 1))?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_detections<W: Write>(dets: &[Detection], mut w: W) -> std::io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
