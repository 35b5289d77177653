//! Pair-IoU mean average precision with seen/unseen or rare/non-rare
//! subsets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, DegenerateBox};
use crate::par::{map_range, Exec};
use crate::pipeline::Detection;

/// Both boxes must overlap their annotation by strictly more than this.
pub const MATCH_IOU: f64 = 0.5;

/// Default number of training positives below which a class is rare.
pub const RARE_THRESHOLD: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPair {
    pub b_h: BBox,
    pub b_o: BBox,
    pub hoi_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image_id: String,
    pub pairs: Vec<GroundTruthPair>,
}

pub fn read_ground_truth<R: BufRead>(reader: R) -> anyhow::Result<Vec<GroundTruthImage>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GroundTruthImage = serde_json::from_str(&line)
            .map_err(|e| anyhow::anyhow!("ground truth line {}: {e}", n + 1))?;
        for p in &g.pairs {
            anyhow::ensure!(
                !p.hoi_ids.is_empty(),
                "ground truth line {}: pair without classes",
                n + 1
            );
            p.b_h.validate()?;
            p.b_o.validate()?;
        }
        out.push(g);
    }
    Ok(out)
}

pub fn write_ground_truth<W: Write>(gt: &[GroundTruthImage], mut w: W) -> std::io::Result<()> {
    for g in gt {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64, DegenerateBox> {
    iou(a, b)
}

/// `min(IoU_h, IoU_o)` of a detected pair against an annotated pair.
pub fn pair_overlap(det: (&BBox, &BBox), gt: (&BBox, &BBox)) -> Result<f64, DegenerateBox> {
    Ok(box_iou(det.0, gt.0)?.min(box_iou(det.1, gt.1)?))
}

/// TP/FP flags for one class's detections, which must already be ranked.
///
/// `dets` and `gts` carry `(image, b_h, b_o)`. Each detection claims the
/// still-unmatched annotation of its image with the highest pair overlap
/// (first index on ties) if that overlap exceeds [`MATCH_IOU`].
pub fn match_detections(
    dets: &[(&str, BBox, BBox)],
    gts: &[(&str, BBox, BBox)],
) -> Result<Vec<bool>, DegenerateBox> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (g, (img, _, _)) in gts.iter().enumerate() {
        by_image.entry(img).or_default().push(g);
    }
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for (img, bh, bo) in dets {
        let mut best: Option<(usize, f64)> = None;
        for &g in by_image.get(img).map(Vec::as_slice).unwrap_or(&[]) {
            if used[g] {
                continue;
            }
            let ov = pair_overlap((bh, bo), (&gts[g].1, &gts[g].2))?;
            if ov > MATCH_IOU && best.is_none_or(|(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok(flags)
}

/// All-point interpolated AP of ranked TP/FP flags against `num_gt`
/// annotations. Zero when `num_gt` is zero.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(flags.len());
    let mut rec = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    // precision envelope, then sum over recall steps
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for k in 0..prec.len() {
        if rec[k] > last_recall {
            ap += (rec[k] - last_recall) * prec[k];
            last_recall = rec[k];
        }
    }
    ap
}

/// How to bucket classes in a report.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitMode {
    /// Only the full mean.
    Full,
    /// Seen vs unseen classes.
    ZeroShot { unseen: BTreeSet<usize> },
    /// Classes with fewer than `threshold` training positives are rare.
    Rarity {
        train_positives: Vec<usize>,
        threshold: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub hoi: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// Per-class AP and subset means. Classes without annotations report AP 0
/// and are left out of every mean; a subset with no scored class has no mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassResult>,
    pub map_full: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_seen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_unseen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_rare: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_nonrare: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

fn subset_mean(per_class: &[ClassResult], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let aps: Vec<f64> = per_class
        .iter()
        .filter(|c| c.num_gt > 0 && keep(c.hoi))
        .map(|c| c.ap)
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Scores detections against annotations over all images.
///
/// Within a class, detections are ranked by descending score; equal scores
/// keep their input order.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruthImage],
    num_classes: usize,
    mode: &SplitMode,
    exec: Exec,
) -> anyhow::Result<EvalReport> {
    let mut dets: Vec<Vec<&Detection>> = vec![Vec::new(); num_classes];
    for d in detections {
        anyhow::ensure!(
            d.hoi < num_classes,
            "detection class {} outside {num_classes} classes",
            d.hoi
        );
        dets[d.hoi].push(d);
    }
    let mut gts: Vec<Vec<(&str, BBox, BBox)>> = vec![Vec::new(); num_classes];
    for img in ground_truth {
        for p in &img.pairs {
            // a pair listing a class twice still counts once
            let ids: BTreeSet<usize> = p.hoi_ids.iter().copied().collect();
            for h in ids {
                anyhow::ensure!(
                    h < num_classes,
                    "annotation class {h} outside {num_classes} classes"
                );
                gts[h].push((img.image_id.as_str(), p.b_h, p.b_o));
            }
        }
    }
    let per_class = map_range(
        exec,
        num_classes,
        |c| -> Result<ClassResult, DegenerateBox> {
            let mut ranked = dets[c].clone();
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
            let keyed: Vec<(&str, BBox, BBox)> = ranked
                .iter()
                .map(|d| (d.image_id.as_str(), d.b_h, d.b_o))
                .collect();
            let flags = match_detections(&keyed, &gts[c])?;
            Ok(ClassResult {
                hoi: c,
                ap: average_precision(&flags, gts[c].len()),
                num_gt: gts[c].len(),
                num_detections: ranked.len(),
            })
        },
    )
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let map_full = subset_mean(&per_class, |_| true).unwrap_or(0.0);
    let mut report = EvalReport {
        per_class,
        map_full,
        map_seen: None,
        map_unseen: None,
        map_rare: None,
        map_nonrare: None,
    };
    match mode {
        SplitMode::Full => {}
        SplitMode::ZeroShot { unseen } => {
            report.map_seen = subset_mean(&report.per_class, |c| !unseen.contains(&c));
            report.map_unseen = subset_mean(&report.per_class, |c| unseen.contains(&c));
        }
        SplitMode::Rarity {
            train_positives,
            threshold,
        } => {
            let rare = |c: usize| train_positives.get(c).copied().unwrap_or(0) < *threshold;
            report.map_rare = subset_mean(&report.per_class, rare);
            report.map_nonrare = subset_mean(&report.per_class, |c| !rare(c));
        }
    }
    Ok(report)
}

/// Deterministically permutes detection scores among all detections. Ranking
/// under the permuted scores is the chance-level control.
pub fn shuffle_scores(detections: &[Detection], seed: u64) -> Vec<Detection> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    scores.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    detections
        .iter()
        .zip(scores)
        .map(|(d, score)| Detection { score, ..d.clone() })
        .collect()
}
