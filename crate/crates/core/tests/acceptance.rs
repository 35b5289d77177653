//! Acceptance criteria. Prints one `PASS`/`FAIL` line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are never captured.
//! The process exits non-zero on any `FAIL` only when
//! `CONSNET_ACCEPTANCE_STRICT=1`; a criterion that panics always fails the run.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use consnet::checkpoint;
use consnet::embedding_store::JointFeature;
use consnet::eval::{evaluate, GroundTruthImage, GroundTruthPair, SplitMode};
use consnet::gat::{attention_coefficients, GatConfig, GatLayerParams, Merge};
use consnet::geometry::BBox;
use consnet::graph::{build_graph, ConsistencyGraph, Epsilons};
use consnet::label_space::{LabelSpace, NodeKind, Scenario};
use consnet::model::{Embedder, Model, ModelConfig};
use consnet::numerics::{ParamStore, Tape, Tensor};
use consnet::par::Exec;
use consnet::pipeline::{classification_score, detect, detection_confidence, Detection};
use consnet::run::{
    detect_and_evaluate, loss_grad_check, prepare, run_experiment, toy_batch, Outcome, RunConfig,
    ZeroShotConfig,
};
use consnet::synth::{generate_corpus, SynthConfig};
use consnet::train::{classification_loss, interactiveness_loss, lr_at, train, TrainConfig};
use consnet::visual::{interactiveness, spatial_config, VisualConfig};

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { name, pass, detail }
}

// ---------------------------------------------------------------- gradients

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        visual: VisualConfig {
            d_a: 6,
            d_v: 6,
            mapper_hidden: 5,
            fusion_human: 3,
            fusion_object: 3,
            fusion_spatial: 2,
            fusion_trunk: 5,
            ..VisualConfig::default()
        },
        semantic: GatConfig {
            heads: 2,
            head_dim: 3,
            out_dim: 6,
            depth: 3,
        },
        embedder: Embedder::Gat,
        d_e: 5,
        gamma: 8.0,
        seed: 11,
    }
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let corpus = generate_corpus(&SynthConfig {
        d_a: 6,
        d_e: 5,
        latent_dim: 4,
        images: 6,
        test_images: 1,
        ..SynthConfig::default()
    })
    .expect("toy corpus");
    let cfg = RunConfig {
        model: toy_model_config(),
        ..RunConfig::default()
    };
    let prep = prepare(&corpus, &cfg).expect("prepare");
    let batch = toy_batch(&prep.samples, 2, 2).expect("batch");
    let mut model = Model::new(cfg.model.clone(), corpus.space.num_classes());
    let report = loss_grad_check(&mut model, &batch, &prep, &cfg.train, 1e-5).expect("grad check");
    let elapsed = start.elapsed();
    verdict(
        "gradient integrity",
        report.max_relative_error < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error {:.3e} over {} coordinates (worst {:?}), {:.1}s",
            report.max_relative_error,
            report.coordinates,
            report.worst_param,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- attention

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap()
}

fn random_space(rng: &mut ChaCha8Rng) -> LabelSpace {
    let na = rng.random_range(1..=5);
    let no = rng.random_range(1..=5);
    let actions: Vec<String> = (0..na).map(|i| format!("a{i}")).collect();
    let objects: Vec<String> = (0..no).map(|i| format!("o{i}")).collect();
    let mut all: Vec<(String, String)> = actions
        .iter()
        .flat_map(|a| objects.iter().map(move |o| (a.clone(), o.clone())))
        .collect();
    all.shuffle(rng);
    let k = rng.random_range(1..=all.len());
    all.truncate(k);
    LabelSpace::build(&actions, &objects, &all).unwrap()
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let p = rng.random_range(0.0..0.6);
    let mut m = vec![false; n * n];
    for i in 0..n {
        m[i * n + i] = true;
        for j in 0..i {
            if rng.random_bool(p) {
                m[i * n + j] = true;
                m[j * n + i] = true;
            }
        }
    }
    m
}

fn attention_simplex() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5171);
    let mut worst_sum: f64 = 0.0;
    let mut violations = Vec::new();
    for draw in 0..100 {
        // alternate between arbitrary masks and consistency-graph masks
        let mask = if draw % 2 == 0 {
            let n = rng.random_range(1..=12);
            random_mask(n, &mut rng)
        } else {
            let space = random_space(&mut rng);
            ConsistencyGraph::compositional(&space).mask()
        };
        let n = (mask.len() as f64).sqrt() as usize;
        let d_in = rng.random_range(1..=6);
        let d_head = rng.random_range(1..=5);
        let heads = rng.random_range(1..=4);
        let mut params = ParamStore::new();
        let layer = GatLayerParams::new(
            &mut params,
            "l",
            d_in,
            d_head,
            heads,
            Merge::Concat,
            &mut rng,
        );
        // widen the attention logits so the softmax is far from uniform
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            params
                .get_mut(id)
                .scale_in_place(rng.random_range(1.0..4.0));
        }
        let h = random_tensor(n, d_in, &mut rng);
        let mut tape = Tape::new(&params);
        let hv = tape.constant(h).unwrap();
        let mus = attention_coefficients(&mut tape, hv, &mask, &layer).unwrap();
        for (d, mu) in mus.iter().enumerate() {
            let mu = tape.value(*mu);
            for i in 0..n {
                let row = mu.row(i);
                let sum: f64 = row.iter().sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
                if (sum - 1.0).abs() > 1e-9 {
                    violations.push(format!("draw {draw} head {d} row {i}: sum {sum}"));
                }
                for (j, &v) in row.iter().enumerate() {
                    if v < 0.0 || (!mask[i * n + j] && v != 0.0) {
                        violations.push(format!(
                            "draw {draw} head {d}: μ[{i},{j}] = {v} outside the neighbourhood"
                        ));
                    }
                }
                if !mask[i * n + i] || row[i] <= 0.0 {
                    violations.push(format!("draw {draw} head {d}: node {i} lacks a self-loop"));
                }
            }
        }
    }
    verdict(
        "attention simplex",
        violations.is_empty(),
        format!(
            "100 draws, max |row sum - 1| = {worst_sum:.2e}, {} violations{}",
            violations.len(),
            violations
                .first()
                .map(|v| format!(" (first: {v})"))
                .unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- graph oracle

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// All pairwise cosines per kind, each node linked to its `ε` best peers
/// (lower index first on ties), mirrored, plus compositional edges and
/// self-loops.
fn oracle_graph(
    space: &LabelSpace,
    feats: &BTreeMap<(usize, usize), Vec<f64>>,
    eps: [usize; 3],
) -> Vec<BTreeSet<usize>> {
    let (na, no, nc) = (
        space.actions().len(),
        space.objects().len(),
        space.num_classes(),
    );
    let offsets = [1, 1 + na, 1 + na + no];
    let sizes = [na, no, nc];
    let n = 1 + na + no + nc;
    let mut adj = vec![BTreeSet::new(); n];
    for (i, a) in adj.iter_mut().enumerate() {
        a.insert(i);
    }
    let link = |adj: &mut Vec<BTreeSet<usize>>, i: usize, j: usize| {
        adj[i].insert(j);
        adj[j].insert(i);
    };
    for kind in 0..3 {
        for i in 0..sizes[kind] {
            let mut scored: Vec<(usize, f64)> = (0..sizes[kind])
                .filter(|&j| j != i)
                .map(|j| (j, cosine(&feats[&(kind, i)], &feats[&(kind, j)])))
                .collect();
            scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            for &(j, _) in scored.iter().take(eps[kind]) {
                link(&mut adj, offsets[kind] + i, offsets[kind] + j);
            }
        }
    }
    for (c, h) in space.hois().iter().enumerate() {
        let t = offsets[2] + c;
        link(&mut adj, t, 0);
        link(&mut adj, t, offsets[0] + h.action);
        link(&mut adj, t, offsets[1] + h.object);
    }
    adj
}

fn graph_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a4f);
    let mut mismatches = Vec::new();
    for trial in 0..50 {
        let space = random_space(&mut rng);
        let dim = rng.random_range(2..=6);
        let sizes = [
            space.actions().len(),
            space.objects().len(),
            space.num_classes(),
        ];
        let eps: [usize; 3] = sizes.map(|s| rng.random_range(0..s));
        let mut feats = BTreeMap::new();
        let mut joint = Vec::new();
        for node in space.nodes() {
            let kind = match node.kind {
                NodeKind::Human => continue,
                NodeKind::Action => 0,
                NodeKind::Object => 1,
                NodeKind::Interaction => 2,
            };
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            feats.insert((kind, node.index), z.clone());
            joint.push(JointFeature { node, z });
        }
        let e = Epsilons {
            action: eps[0],
            object: eps[1],
            interaction: eps[2],
        };
        let g = build_graph(&space, &joint, e, Exec::Sequential).expect("graph");
        let want = oracle_graph(&space, &feats, eps);
        for (i, w) in want.iter().enumerate() {
            let got: BTreeSet<usize> = g.neighbors(i).iter().copied().collect();
            if &got != w {
                mismatches.push(format!("trial {trial} node {i}: {got:?} vs {w:?}"));
            }
        }
    }
    verdict(
        "graph oracle",
        mismatches.is_empty(),
        format!(
            "50 random spaces, {} mismatching adjacency lists{}",
            mismatches.len(),
            mismatches
                .first()
                .map(|m| format!(" (first: {m})"))
                .unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- mAP oracle

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// Brute-force per-class AP: rank by score (stable), match greedily to the
/// best-overlapping unmatched annotation, then sum precision-envelope values
/// at every true positive.
fn oracle_ap(dets: &[Detection], gt: &[GroundTruthImage], class: usize) -> (f64, usize) {
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.hoi == class).collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut targets: Vec<(&str, &GroundTruthPair)> = Vec::new();
    for img in gt {
        for p in &img.pairs {
            if p.hoi_ids.contains(&class) {
                targets.push((&img.image_id, p));
            }
        }
    }
    let num_gt = targets.len();
    let mut used = vec![false; num_gt];
    let mut tp = Vec::new();
    for d in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (k, (img, p)) in targets.iter().enumerate() {
            if used[k] || *img != d.image_id {
                continue;
            }
            let o = box_iou(&d.b_h, &p.b_h).min(box_iou(&d.b_o, &p.b_o));
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, o)) if o > 0.5 => {
                used[k] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    if num_gt == 0 {
        return (0.0, 0);
    }
    let mut precision = Vec::new();
    let mut hits = 0;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
    }
    let mut ap = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            let envelope = precision[i..].iter().cloned().fold(0.0, f64::max);
            ap += envelope / num_gt as f64;
        }
    }
    (ap, num_gt)
}

fn jittered(b: &BBox, amount: f64, rng: &mut ChaCha8Rng) -> BBox {
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    let mut d = || rng.random_range(-amount..=amount);
    let (x1, y1) = (b.x1 + d() * w, b.y1 + d() * h);
    let (x2, y2) = (b.x2 + d() * w, b.y2 + d() * h);
    BBox::new(
        x1.min(x2 - 1.0),
        y1.min(y2 - 1.0),
        x2.max(x1 + 1.0),
        y2.max(y1 + 1.0),
    )
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..80.0);
    let y = rng.random_range(0.0..80.0);
    BBox::new(
        x,
        y,
        x + rng.random_range(5.0..30.0),
        y + rng.random_range(5.0..30.0),
    )
}

fn map_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a9);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..100 {
        let classes = rng.random_range(1..=3);
        let mut gt = Vec::new();
        let mut dets = Vec::new();
        for i in 0..rng.random_range(1..=4) {
            let image_id = format!("img{i}");
            let mut pairs = Vec::new();
            for _ in 0..rng.random_range(0..=3) {
                let mut ids: Vec<usize> = (0..classes).filter(|_| rng.random_bool(0.5)).collect();
                if ids.is_empty() {
                    ids.push(rng.random_range(0..classes));
                }
                pairs.push(GroundTruthPair {
                    b_h: random_box(&mut rng),
                    b_o: random_box(&mut rng),
                    hoi_ids: ids,
                });
            }
            for _ in 0..rng.random_range(0..=8) {
                let (b_h, b_o) = match pairs.choose(&mut rng) {
                    Some(p) if rng.random_bool(0.7) => {
                        let amount = rng.random_range(0.0..0.3);
                        (
                            jittered(&p.b_h, amount, &mut rng),
                            jittered(&p.b_o, amount, &mut rng),
                        )
                    }
                    _ => (random_box(&mut rng), random_box(&mut rng)),
                };
                dets.push(Detection {
                    image_id: image_id.clone(),
                    b_h,
                    b_o,
                    hoi: rng.random_range(0..classes),
                    score: rng.random_range(0.0..1.0),
                });
            }
            gt.push(GroundTruthImage { image_id, pairs });
        }
        let report =
            evaluate(&dets, &gt, classes, &SplitMode::Full, Exec::Sequential).expect("evaluate");
        for c in 0..classes {
            let (ap, num_gt) = oracle_ap(&dets, &gt, c);
            let got = &report.per_class[c];
            if got.num_gt != num_gt {
                worst = f64::INFINITY;
            }
            worst = worst.max((got.ap - ap).abs());
            checked += 1;
        }
    }
    verdict(
        "mAP oracle",
        worst <= 1e-9,
        format!("100 random sets, {checked} classes, max |ΔAP| = {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- closed form

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn closed_form() -> Verdict {
    let mut errs: Vec<(String, f64, f64)> = Vec::new();
    let mut check = |what: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol || !got.is_finite() {
            errs.push((what.to_owned(), got, want));
        }
    };

    let unit = BBox::new(0.0, 0.0, 1.0, 1.0);
    let s = spatial_config(&unit, &unit).unwrap();
    for (k, want) in [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        .into_iter()
        .enumerate()
    {
        check("spatial unit", s[k], want, 1e-12);
    }
    let s = spatial_config(
        &BBox::new(0.0, 0.0, 2.0, 2.0),
        &BBox::new(2.0, 0.0, 4.0, 2.0),
    )
    .unwrap();
    // union [0,0,4,2], area 8
    let want = [
        0.0,
        2.0 / 8.0,
        0.0,
        2.0 / 8.0,
        2.0 / 8.0,
        4.0 / 8.0,
        0.0,
        2.0 / 8.0,
    ];
    for k in 0..8 {
        check("spatial side by side", s[k], want[k], 1e-12);
    }
    let a = spatial_config(
        &BBox::new(3.0, 4.0, 9.0, 12.0),
        &BBox::new(5.0, 1.0, 7.0, 6.0),
    )
    .unwrap();
    let b = spatial_config(
        &BBox::new(13.0, 14.0, 19.0, 22.0),
        &BBox::new(15.0, 11.0, 17.0, 16.0),
    )
    .unwrap();
    for k in 0..8 {
        check("spatial translation", a[k], b[k], 1e-12);
    }

    check("interactiveness zero", interactiveness([0.0; 4]), 0.5, 1e-9);
    check(
        "interactiveness mixed",
        interactiveness([1.0, 0.5, -0.5, 1.0]),
        logistic(2.0),
        1e-9,
    );
    check(
        "interactiveness saturated",
        interactiveness([-10.0; 4]),
        logistic(-40.0),
        1e-9,
    );

    check(
        "confidence",
        detection_confidence(0.8, 0.9, 0.7, 0.5),
        0.8 * 0.9 * 0.7 * 0.5,
        1e-9,
    );
    check(
        "confidence unit",
        detection_confidence(1.0, 1.0, 1.0, 1.0),
        1.0,
        1e-9,
    );

    let v: [&[f64]; 4] = [&[1.0, 2.0], &[0.0, 1.0], &[-1.0, 3.0], &[2.0, -1.0]];
    check(
        "score self",
        classification_score(v, v, 8.0).unwrap(),
        logistic(32.0),
        1e-9,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let vs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ss: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let want = logistic(8.0 * (0..4).map(|k| cosine(&vs[k], &ss[k])).sum::<f64>());
        let got = classification_score(
            [&vs[0], &vs[1], &vs[2], &vs[3]],
            [&ss[0], &ss[1], &ss[2], &ss[3]],
            8.0,
        )
        .unwrap();
        check("score random", got, want, 1e-9);
    }

    check(
        "interactiveness loss u=1",
        interactiveness_loss(0.5, 1.0),
        2f64.ln(),
        1e-9,
    );
    check(
        "interactiveness loss u=0",
        interactiveness_loss(0.5, 0.0),
        2f64.ln(),
        1e-9,
    );
    check(
        "interactiveness loss 0.9",
        interactiveness_loss(0.9, 1.0),
        -(0.9f64.ln()),
        1e-9,
    );
    let want = (-(0.9f64.ln()) - (0.9f64).ln() - (0.5f64).ln()) / 3.0;
    check(
        "classification loss",
        classification_loss(&[0.9, 0.1, 0.5], &[1.0, 0.0, 1.0]),
        want,
        1e-9,
    );
    check(
        "classification loss half",
        classification_loss(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]),
        2f64.ln(),
        1e-9,
    );

    let tc = TrainConfig::default();
    let lr0 = lr_at(0, 5000, &tc);
    let lr500 = lr_at(500, 5000, &tc);
    if lr0 != 0.001 {
        errs.push(("lr at 0".into(), lr0, 0.001));
    }
    if lr500 != 0.01 {
        errs.push(("lr at 500".into(), lr500, 0.01));
    }

    verdict(
        "closed-form checks",
        errs.is_empty(),
        match errs.first() {
            None => "spatial layout, interactiveness, confidence, class score, losses, schedule endpoints".into(),
            Some((w, g, e)) => format!("{} failures (first: {w}: got {g}, expected {e})", errs.len()),
        },
    )
}

// ---------------------------------------------------------------- training runs

fn bits(xs: impl IntoIterator<Item = f64>) -> Vec<u64> {
    xs.into_iter().map(f64::to_bits).collect()
}

fn same_outcome(a: &Outcome, b: &Outcome) -> bool {
    bits(a.history.iter().map(|r| r.total)) == bits(b.history.iter().map(|r| r.total))
        && a.report == b.report
        && bits(a.detections.iter().map(|d| d.score)) == bits(b.detections.iter().map(|d| d.score))
}

fn final_loss(o: &Outcome) -> f64 {
    let tail = &o.history[o.history.len().saturating_sub(10)..];
    tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64
}

fn supervised_run() -> Verdict {
    let corpus = generate_corpus(&SynthConfig::default()).expect("corpus");
    let cfg = RunConfig::default();
    let start = Instant::now();
    let first = run_experiment(&corpus, &cfg).expect("run");
    let elapsed = start.elapsed();
    let second = run_experiment(&corpus, &cfg).expect("rerun");
    let initial = first.history[0].total;
    let last = final_loss(&first);
    let deterministic = same_outcome(&first, &second);
    let map = first.report.map_full;
    let pass =
        last <= 0.5 * initial && map >= 0.70 && elapsed < Duration::from_secs(300) && deterministic;
    verdict(
        "supervised synthetic run",
        pass,
        format!(
            "{} steps, loss {initial:.4} -> {last:.4} (ratio {:.3}, need <= 0.5), full mAP {map:.4} (need >= 0.70), \
             chance {:.4}, {:.1}s (need < 300s), deterministic {deterministic}",
            first.history.len(),
            last / initial,
            first.chance.map_full,
            elapsed.as_secs_f64()
        ),
    )
}

/// Reduced widths for the repeated zero-shot runs.
fn zero_shot_model(embedder: Embedder) -> ModelConfig {
    ModelConfig {
        visual: VisualConfig {
            d_v: 128,
            mapper_hidden: 128,
            fusion_human: 64,
            fusion_object: 64,
            fusion_spatial: 32,
            fusion_trunk: 128,
            ..VisualConfig::default()
        },
        semantic: GatConfig {
            heads: 4,
            head_dim: 32,
            out_dim: 128,
            depth: 3,
        },
        embedder,
        ..ModelConfig::default()
    }
}

fn zero_shot_synth() -> SynthConfig {
    SynthConfig::default()
}

fn zero_shot_run(embedder: Embedder, zs: ZeroShotConfig) -> RunConfig {
    RunConfig {
        model: zero_shot_model(embedder),
        train: TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        },
        zero_shot: Some(zs),
        ..RunConfig::default()
    }
}

fn unseen_combination_transfer() -> Verdict {
    let corpus = generate_corpus(&zero_shot_synth()).expect("corpus");
    let mut sums = BTreeMap::new();
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let zs = ZeroShotConfig {
            scenario: Scenario::UnseenCombination,
            fraction: 0.2,
            seed,
        };
        for embedder in [Embedder::Gat, Embedder::Mlp] {
            let o = run_experiment(&corpus, &zero_shot_run(embedder, zs)).expect("zero-shot run");
            let unseen = o.report.map_unseen.expect("unseen classes");
            let chance = o.chance.map_unseen.expect("unseen classes");
            let e = sums.entry(format!("{embedder:?}")).or_insert((0.0, 0.0));
            e.0 += unseen / 5.0;
            e.1 += chance / 5.0;
            per_seed.push(format!("{embedder:?}/{seed} {unseen:.3}"));
        }
    }
    let (gat, gat_chance) = sums["Gat"];
    let (mlp, _) = sums["Mlp"];
    verdict(
        "unseen-combination transfer",
        gat >= 2.0 * gat_chance && gat >= mlp + 0.03,
        format!(
            "mean unseen mAP over 5 seeds: GAT {gat:.4}, shuffled {gat_chance:.4} (need GAT >= {:.4}), MLP {mlp:.4} \
             (need GAT >= {:.4}); per seed [{}]",
            2.0 * gat_chance,
            mlp + 0.03,
            per_seed.join(", ")
        ),
    )
}

fn unseen_action_runs() -> Verdict {
    let corpus = generate_corpus(&zero_shot_synth()).expect("corpus");
    let zs = ZeroShotConfig {
        scenario: Scenario::UnseenAction,
        fraction: 0.25,
        seed: 0,
    };
    let o = run_experiment(&corpus, &zero_shot_run(Embedder::Gat, zs)).expect("unseen-action run");
    let unseen = o.report.map_unseen.expect("unseen classes");
    let chance = o.chance.map_unseen.expect("unseen classes");
    verdict(
        "unseen-action scenario",
        unseen > chance,
        format!(
            "{} of {} classes unseen, unseen mAP {unseen:.4} vs shuffled {chance:.4}",
            count_unseen(&corpus.space, zs),
            corpus.space.num_classes()
        ),
    )
}

fn count_unseen(space: &LabelSpace, zs: ZeroShotConfig) -> usize {
    consnet::run::make_split(space, Some(&zs))
        .map(|s| s.unseen.len())
        .unwrap_or(0)
}

fn checkpoint_and_determinism() -> Verdict {
    let corpus = generate_corpus(&SynthConfig {
        images: 60,
        test_images: 20,
        ..SynthConfig::default()
    })
    .expect("corpus");
    let cfg = RunConfig {
        model: zero_shot_model(Embedder::Gat),
        train: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let prep = prepare(&corpus, &cfg).expect("prepare");
    let mut model = Model::new(cfg.model.clone(), corpus.space.num_classes());
    train(
        &mut model,
        &prep.samples,
        &prep.ctx,
        &cfg.train,
        &prep.trained,
    )
    .expect("train");

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).expect("save");
    let loaded = checkpoint::load(&path).expect("load");
    let score = |m: &Model| {
        let cache = m.cache(&prep.ctx).unwrap();
        let dets = detect(
            m,
            &prep.ctx,
            &cache,
            &prep.test_images,
            cfg.detect.theta_nis,
            Exec::Sequential,
        )
        .unwrap();
        bits(dets.iter().map(|d| d.score))
    };
    let (before, after) = (score(&model), score(&loaded));
    let round_trip = !before.is_empty() && before == after;
    let (_, r1, _) = detect_and_evaluate(&loaded, &prep, &corpus.test_gt, &cfg).expect("evaluate");

    let a = run_experiment(&corpus, &cfg).expect("run");
    let b = run_experiment(&corpus, &cfg).expect("rerun");
    let deterministic = same_outcome(&a, &b);
    let reloaded_report = r1 == a.report;
    verdict(
        "checkpoint round-trip and config determinism",
        round_trip && deterministic && reloaded_report,
        format!(
            "{} detection scores bit-identical after reload: {round_trip}; identical reruns: {deterministic}; \
             reloaded model reproduces the run's report: {reloaded_report}",
            before.len()
        ),
    )
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("gradient", gradient_integrity),
        ("attention", attention_simplex),
        ("graph", graph_oracle),
        ("map", map_oracle),
        ("closed", closed_form),
        ("checkpoint", checkpoint_and_determinism),
        ("supervised", supervised_run),
        ("uc", unseen_combination_transfer),
        ("ua", unseen_action_runs),
    ];
    let mut verdicts = Vec::new();
    for (key, run) in criteria {
        if filter.as_deref().is_some_and(|f| !key.contains(f)) {
            continue;
        }
        verdicts.push(run());
    }
    let failed: Vec<&Verdict> = verdicts.iter().filter(|v| !v.pass).collect();
    println!(
        "acceptance: {}/{} PASS",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    for v in &failed {
        println!("  failing: {} ({})", v.name, v.detail);
    }
    let strict = std::env::var("CONSNET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
