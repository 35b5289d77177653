//! Synthetic compositional corpus.
//!
//! Every action, object, and action-object combination has a latent
//! prototype. A combination's prototype mixes its action's and object's
//! prototypes with a private residual. Word vectors are a fixed linear image
//! of the action/object prototypes plus noise; a human's appearance encodes
//! its action and the residual of the combination it performs, an object's
//! appearance encodes its category. Interacting pairs are placed in contact;
//! other objects are scattered.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    read_records, write_records, FeatureRecord, RecordKind, WordVectorTable,
};
use crate::eval::{read_ground_truth, write_ground_truth, GroundTruthImage, GroundTruthPair};
use crate::geometry::BBox;
use crate::label_space::LabelSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_actions: usize,
    pub n_objects: usize,
    /// Fraction of all action-object pairs that are valid classes.
    pub combo_density: f64,
    pub d_a: usize,
    pub d_e: usize,
    pub latent_dim: usize,
    pub images: usize,
    pub test_images: usize,
    pub humans_per_image: usize,
    pub candidates_per_image: usize,
    /// Probability that a human interacts with some object.
    pub interact_prob: f64,
    /// Appearance noise, relative to the norm of a clean feature.
    pub noise_sigma: f64,
    /// Word-vector noise, relative to the norm of a clean vector.
    pub word_noise: f64,
    /// Weights of the action prototype, object prototype, and private
    /// residual in a combination's prototype.
    pub alpha: f64,
    pub beta: f64,
    pub residual: f64,
    /// Objects fall into this many visual families; 0 gives every object its
    /// own family.
    pub object_groups: usize,
    /// Weight of an object's own direction against its family's, in [0, 1].
    pub object_spread: f64,
    /// Fraction of a combination's residual shared by all combinations of the
    /// same action with objects of the same family, in [0, 1].
    pub residual_sharing: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_actions: 8,
            n_objects: 10,
            combo_density: 0.5,
            d_a: 64,
            d_e: 64,
            latent_dim: 16,
            images: 400,
            test_images: 100,
            humans_per_image: 2,
            candidates_per_image: 10,
            interact_prob: 0.85,
            noise_sigma: 0.3,
            word_noise: 0.3,
            alpha: 1.0,
            beta: 1.0,
            residual: 0.7,
            object_groups: 0,
            object_spread: 1.0,
            residual_sharing: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("density {density} gives {classes} classes, fewer than the {needed} needed to use every action and object")]
    InfeasibleDensity {
        density: f64,
        classes: usize,
        needed: usize,
    },
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
}

/// Everything a run reads from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub space: LabelSpace,
    pub words: WordVectorTable,
    pub train_detections: Vec<FeatureRecord>,
    pub train_crops: Vec<FeatureRecord>,
    pub train_gt: Vec<GroundTruthImage>,
    pub test_detections: Vec<FeatureRecord>,
    pub test_gt: Vec<GroundTruthImage>,
}

pub const LABELSPACE_FILE: &str = "labelspace.json";
pub const WORDS_FILE: &str = "word_vectors.jsonl";
pub const TRAIN_DETECTIONS_FILE: &str = "train_detections.jsonl";
pub const TRAIN_CROPS_FILE: &str = "train_crops.jsonl";
pub const TRAIN_GT_FILE: &str = "train_gt.jsonl";
pub const TEST_DETECTIONS_FILE: &str = "test_detections.jsonl";
pub const TEST_GT_FILE: &str = "test_gt.jsonl";

impl Corpus {
    pub fn write_dir(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(LABELSPACE_FILE), self.space.to_json())?;
        self.words
            .write_jsonl(BufWriter::new(File::create(dir.join(WORDS_FILE))?))?;
        let recs = [
            (TRAIN_DETECTIONS_FILE, &self.train_detections),
            (TRAIN_CROPS_FILE, &self.train_crops),
            (TEST_DETECTIONS_FILE, &self.test_detections),
        ];
        for (name, r) in recs {
            write_records(r, BufWriter::new(File::create(dir.join(name))?))?;
        }
        write_ground_truth(
            &self.train_gt,
            BufWriter::new(File::create(dir.join(TRAIN_GT_FILE))?),
        )?;
        write_ground_truth(
            &self.test_gt,
            BufWriter::new(File::create(dir.join(TEST_GT_FILE))?),
        )?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> anyhow::Result<Self> {
        let open = |name: &str| -> anyhow::Result<BufReader<File>> {
            let p = dir.join(name);
            File::open(&p)
                .map(BufReader::new)
                .map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))
        };
        Ok(Self {
            space: LabelSpace::load(&dir.join(LABELSPACE_FILE))?,
            words: WordVectorTable::read_jsonl(open(WORDS_FILE)?)?,
            train_detections: read_records(open(TRAIN_DETECTIONS_FILE)?)?,
            train_crops: read_records(open(TRAIN_CROPS_FILE)?)?,
            train_gt: read_ground_truth(open(TRAIN_GT_FILE)?)?,
            test_detections: read_records(open(TEST_DETECTIONS_FILE)?)?,
            test_gt: read_ground_truth(open(TEST_GT_FILE)?)?,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `rows × cols` Gaussian matrix scaled by `1/√cols`, row-major.
fn projection(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let s = 1.0 / (cols as f64).sqrt();
    (0..rows).map(|_| gaussian(rng, cols, s)).collect()
}

fn apply(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn axpy(acc: &mut [f64], k: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += k * v;
    }
}

fn with_noise(rng: &mut ChaCha8Rng, v: Vec<f64>, sigma: f64) -> Vec<f64> {
    let n = gaussian(rng, v.len(), sigma);
    v.into_iter().zip(n).map(|(a, b)| a + b).collect()
}

/// Picks the valid pairs: a covering set so every action and object occurs,
/// then uniformly random extra pairs up to the target count.
fn choose_pairs(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>, SynthError> {
    let (na, no) = (cfg.n_actions, cfg.n_objects);
    let target = (cfg.combo_density * (na * no) as f64).round() as usize;
    let needed = na.max(no);
    if target < needed || target > na * no {
        return Err(SynthError::InfeasibleDensity {
            density: cfg.combo_density,
            classes: target,
            needed,
        });
    }
    let mut a_perm: Vec<usize> = (0..na).collect();
    let mut o_perm: Vec<usize> = (0..no).collect();
    a_perm.shuffle(rng);
    o_perm.shuffle(rng);
    let mut chosen: BTreeSet<(usize, usize)> = (0..needed)
        .map(|i| (a_perm[i % na], o_perm[i % no]))
        .collect();
    let mut rest: Vec<(usize, usize)> = (0..na)
        .flat_map(|a| (0..no).map(move |o| (a, o)))
        .filter(|p| !chosen.contains(p))
        .collect();
    rest.shuffle(rng);
    for p in rest {
        if chosen.len() >= target {
            break;
        }
        chosen.insert(p);
    }
    Ok(chosen.into_iter().collect())
}

struct Latent {
    action: Vec<Vec<f64>>,
    object: Vec<Vec<f64>>,
    residual: Vec<Vec<f64>>,
    idle: Vec<f64>,
    human_map: Vec<Vec<f64>>,
    object_map: Vec<Vec<f64>>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, frac: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.random_range(-frac..=frac);
    BBox::new(
        b.x1 + d() * w,
        b.y1 + d() * h,
        b.x2 + d() * w,
        b.y2 + d() * h,
    )
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    let x = rng.random_range(0.0..WIDTH - w);
    let y = rng.random_range(0.0..HEIGHT - h);
    BBox::new(x, y, x + w, y + h)
}

fn image_split(
    cfg: &SynthConfig,
    space: &LabelSpace,
    lat: &Latent,
    prefix: &str,
    n_images: usize,
    rng: &mut ChaCha8Rng,
) -> (
    Vec<FeatureRecord>,
    Vec<FeatureRecord>,
    Vec<GroundTruthImage>,
) {
    let n_obj = cfg.candidates_per_image / cfg.humans_per_image;
    // clean features have per-entry variance 1/latent_dim
    let sigma = cfg.noise_sigma / (cfg.latent_dim as f64).sqrt();
    let det_sigma = 0.05 / (cfg.latent_dim as f64).sqrt();
    let mut dets = Vec::new();
    let mut crops = Vec::new();
    let mut gts = Vec::new();
    for i in 0..n_images {
        let image_id = format!("{prefix}{i:05}");
        let mut pairs = Vec::new();
        let mut objects: Vec<(BBox, usize)> = Vec::new();
        let mut humans: Vec<(BBox, Vec<f64>, Option<usize>)> = Vec::new();
        for _ in 0..cfg.humans_per_image {
            let (w, h) = (rng.random_range(50.0..90.0), rng.random_range(120.0..200.0));
            let hb = random_box(rng, w, h);
            let class = (objects.len() < n_obj && rng.random_bool(cfg.interact_prob))
                .then(|| rng.random_range(0..space.num_classes()));
            let latent = match class {
                Some(c) => {
                    let h = space.hois()[c];
                    let mut z = lat.action[h.action].clone();
                    axpy(&mut z, cfg.residual, &lat.residual[c]);
                    // the object sits against the human's side
                    let (ow, oh) = (rng.random_range(30.0..70.0), rng.random_range(30.0..70.0));
                    let ox = if rng.random_bool(0.5) {
                        hb.x2 - 0.3 * ow
                    } else {
                        hb.x1 - 0.7 * ow
                    };
                    let oy = hb.y1 + rng.random_range(0.2..0.7) * hb.height();
                    let ob = BBox::new(ox, oy, ox + ow, oy + oh);
                    objects.push((ob, h.object));
                    pairs.push(GroundTruthPair {
                        b_h: hb,
                        b_o: ob,
                        hoi_ids: vec![c],
                    });
                    z
                }
                None => lat.idle.clone(),
            };
            let feat = with_noise(rng, apply(&lat.human_map, &latent), sigma);
            humans.push((hb, feat, class));
        }
        while objects.len() < n_obj {
            let s = rng.random_range(30.0..70.0);
            objects.push((
                random_box(rng, s, s),
                rng.random_range(0..space.objects().len()),
            ));
        }
        for (hb, feat, class) in &humans {
            if let Some(c) = class {
                let action = &space.actions()[space.hois()[*c].action];
                crops.push(FeatureRecord {
                    image_id: image_id.clone(),
                    bbox: *hb,
                    label: action.clone(),
                    kind: RecordKind::Human,
                    score: 1.0,
                    feature: feat.clone(),
                });
            }
            dets.push(FeatureRecord {
                image_id: image_id.clone(),
                bbox: jitter(rng, hb, 0.04),
                label: "human".into(),
                kind: RecordKind::Human,
                score: rng.random_range(0.7..1.0),
                feature: with_noise(rng, feat.clone(), det_sigma),
            });
        }
        for (ob, o) in &objects {
            let feat = with_noise(rng, apply(&lat.object_map, &lat.object[*o]), sigma);
            let label = space.objects()[*o].clone();
            crops.push(FeatureRecord {
                image_id: image_id.clone(),
                bbox: *ob,
                label: label.clone(),
                kind: RecordKind::Object,
                score: 1.0,
                feature: feat.clone(),
            });
            dets.push(FeatureRecord {
                image_id: image_id.clone(),
                bbox: jitter(rng, ob, 0.04),
                label,
                kind: RecordKind::Object,
                score: rng.random_range(0.4..1.0),
                feature: with_noise(rng, feat, det_sigma),
            });
        }
        gts.push(GroundTruthImage { image_id, pairs });
    }
    (dets, crops, gts)
}

/// Builds a corpus; the same config always yields the same corpus.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    if cfg.humans_per_image == 0 || cfg.candidates_per_image < cfg.humans_per_image {
        return Err(SynthError::Invalid(
            "need at least one human and one object per image".into(),
        ));
    }
    if cfg.n_actions == 0
        || cfg.n_objects == 0
        || cfg.latent_dim == 0
        || cfg.d_a == 0
        || cfg.d_e == 0
    {
        return Err(SynthError::Invalid("sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.interact_prob) {
        return Err(SynthError::Invalid(
            "interaction probability outside [0, 1]".into(),
        ));
    }
    for (name, v) in [
        ("object spread", cfg.object_spread),
        ("residual sharing", cfg.residual_sharing),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SynthError::Invalid(format!("{name} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = choose_pairs(cfg, &mut rng)?;
    let actions: Vec<String> = (0..cfg.n_actions).map(|i| format!("act{i}")).collect();
    let objects: Vec<String> = (0..cfg.n_objects).map(|i| format!("obj{i}")).collect();
    let named: Vec<(String, String)> = pairs
        .iter()
        .map(|&(a, o)| (actions[a].clone(), objects[o].clone()))
        .collect();
    let space = LabelSpace::build(&actions, &objects, &named)
        .map_err(|e| SynthError::Invalid(e.to_string()))?;

    let l = cfg.latent_dim;
    let unit = 1.0 / (l as f64).sqrt();
    let lat = {
        let action: Vec<Vec<f64>> = (0..cfg.n_actions)
            .map(|_| gaussian(&mut rng, l, unit))
            .collect();
        let groups = if cfg.object_groups == 0 {
            cfg.n_objects
        } else {
            cfg.object_groups
        };
        let family = |o: usize| o % groups;
        let family_proto: Vec<Vec<f64>> =
            (0..groups).map(|_| gaussian(&mut rng, l, unit)).collect();
        let s = cfg.object_spread;
        let object: Vec<Vec<f64>> = (0..cfg.n_objects)
            .map(|o| {
                let mut p = gaussian(&mut rng, l, unit * s);
                axpy(&mut p, (1.0 - s * s).sqrt(), &family_proto[family(o)]);
                p
            })
            .collect();
        let f = cfg.residual_sharing;
        let shared: Vec<Vec<Vec<f64>>> = (0..cfg.n_actions)
            .map(|_| (0..groups).map(|_| gaussian(&mut rng, l, unit)).collect())
            .collect();
        let residual: Vec<Vec<f64>> = pairs
            .iter()
            .map(|&(a, o)| {
                // a combination's own part, expressed on top of its constituents
                let mut r = gaussian(&mut rng, l, unit * (1.0 - f * f).sqrt());
                axpy(&mut r, f, &shared[a][family(o)]);
                axpy(&mut r, cfg.alpha - 1.0, &action[a]);
                axpy(&mut r, cfg.beta, &object[o]);
                r
            })
            .collect();
        Latent {
            idle: gaussian(&mut rng, l, unit),
            human_map: projection(&mut rng, cfg.d_a, l),
            object_map: projection(&mut rng, cfg.d_a, l),
            action,
            object,
            residual,
        }
    };

    let word_map = projection(&mut rng, cfg.d_e, l);
    let mut words = WordVectorTable::new();
    let insert =
        |words: &mut WordVectorTable, token: &str, latent: &[f64], rng: &mut ChaCha8Rng| {
            let v = with_noise(rng, apply(&word_map, latent), cfg.word_noise * unit);
            words
                .insert(token, v)
                .map_err(|e| SynthError::Invalid(e.to_string()))
        };
    let human_latent = gaussian(&mut rng, l, unit);
    insert(&mut words, "human", &human_latent, &mut rng)?;
    for (i, a) in actions.iter().enumerate() {
        insert(&mut words, a, &lat.action[i], &mut rng)?;
    }
    for (i, o) in objects.iter().enumerate() {
        insert(&mut words, o, &lat.object[i], &mut rng)?;
    }

    let (train_detections, train_crops, train_gt) =
        image_split(cfg, &space, &lat, "train", cfg.images, &mut rng);
    let (test_detections, _, test_gt) =
        image_split(cfg, &space, &lat, "test", cfg.test_images, &mut rng);
    Ok(Corpus {
        space,
        words,
        train_detections,
        train_crops,
        train_gt,
        test_detections,
        test_gt,
    })
}
