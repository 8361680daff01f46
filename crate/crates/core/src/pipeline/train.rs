use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineConfig;
use crate::data::{Dataset, Label, Split};
use crate::dgsb::{difficulty_filter, embed, kmeans, sample_balanced, DefaultEmbedder};
use crate::error::{Error, Result};
use crate::incdp::{child_weights, generate_child_labels, Centers, ChildWeights};
use crate::localize::{crop_at, extract_candidates, Patch};
use crate::nn::{forward_backward, prepare_input, Classifier, Example, Flip, LossSettings, MixPlan, Sgd};
use crate::stain::{hematoxylin_channel, Restainer, RgbImage, StainBasisRestainer};
use crate::Point;

// independent random streams derived from one seed
const STREAM_SAMPLING: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_RESTAIN: u64 = 3;
const STREAM_DIFF: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrigin {
    /// A localized nucleus candidate.
    Candidate,
    /// An annotated mitosis the localizer missed, added at its annotation.
    Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub cx: usize,
    pub cy: usize,
    /// 1 for mitosis, 0 otherwise.
    pub label: u8,
    pub origin: SampleOrigin,
    /// Label of the nearest annotation within the positive radius, if any.
    pub nearest: Option<Label>,
    /// Negative-feature cluster, when cluster-stratified sampling ran.
    pub cluster: Option<usize>,
}

/// Bookkeeping of one negative cluster through both samplers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub size: usize,
    /// Members lying on an annotated hard negative.
    pub hard_negatives: usize,
    pub after_first: usize,
    pub after_second: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub candidates: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Negatives left by cluster-stratified sampling (all, without it).
    pub after_first: usize,
    /// Negatives left by the difficulty filter.
    pub after_second: usize,
    /// Per-cluster counts, empty without cluster-stratified sampling.
    pub clusters: Vec<ClusterStats>,
}

/// The balanced training set: which patches to train on, with labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub stats: ManifestStats,
}

/// One training patch.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub patch: RgbImage,
    pub parent: u8,
    pub child: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub focal_p: f64,
    pub center_p: f64,
    pub focal_c: Option<f64>,
    pub center_c: Option<f64>,
    pub total: f64,
}

/// Classifier with its loss state, the configuration it was trained with and
/// the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub classifier: Classifier,
    pub centers_parent: Centers,
    pub centers_child: Option<Centers>,
    pub child_weights: Option<ChildWeights>,
    pub config: PipelineConfig,
    pub seed: u64,
}

impl TrainedModel {
    pub fn new(config: &PipelineConfig, seed: u64) -> Self {
        let classifier = Classifier::new(&config.train.channels, seed);
        let k = classifier.feature_dim();
        Self {
            classifier,
            centers_parent: Centers::zeros(2, k),
            centers_child: None,
            child_weights: None,
            config: config.clone(),
            seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub history: Vec<EpochLoss>,
    pub stats: ManifestStats,
}

/// Optimization settings of one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub center_rate: f64,
    /// `(beta, probability, sorted)` of feature mixing, if enabled.
    pub mix: Option<(f64, f64, bool)>,
}

impl FitOptions {
    pub fn from_config(cfg: &PipelineConfig, epochs: usize) -> Self {
        let i = &cfg.incdp;
        Self {
            epochs,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            momentum: cfg.train.momentum,
            weight_decay: cfg.train.weight_decay,
            gamma: i.gamma,
            lambda: i.lambda,
            center_rate: i.center_rate,
            mix: cfg.flags.se.then_some((i.mix_beta, i.mix_prob, i.mix_sorted)),
        }
    }
}

/// Mini-batch gradient descent over `samples`. Child loss terms are active
/// when the model has a child head. Epoch numbers start at `first_epoch`.
pub fn fit(
    model: &mut TrainedModel,
    samples: &[TrainSample],
    opts: &FitOptions,
    rng: &mut ChaCha8Rng,
    first_epoch: usize,
) -> Result<Vec<EpochLoss>> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples("no training samples".into()));
    }
    let mut sgd = Sgd::new(opts.lr, opts.momentum, opts.weight_decay);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let n = samples.len() as f64;
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let (mut fp, mut cp, mut fc, mut cc) = (0.0, 0.0, 0.0, 0.0);
        let mut child_active = false;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| Example {
                    input: prepare_input(&samples[i].patch, Flip::random(rng)),
                    parent: samples[i].parent,
                    child: samples[i].child,
                })
                .collect();
            let plan = match opts.mix {
                Some((beta, prob, sorted)) if batch.len() > 1 && rng.random_bool(prob) => {
                    Some(MixPlan::sample(batch.len(), beta, sorted, rng))
                }
                _ => None,
            };
            let TrainedModel {
                classifier,
                centers_parent,
                centers_child,
                child_weights,
                ..
            } = model;
            let settings = LossSettings {
                gamma: opts.gamma,
                lambda: opts.lambda,
                center_rate: opts.center_rate,
                child_weights: child_weights.as_ref(),
            };
            classifier.zero_grad();
            let terms = forward_backward(
                classifier,
                &batch,
                centers_parent,
                centers_child.as_mut(),
                &settings,
                plan.as_ref(),
            )?;
            sgd.step(classifier);
            fp += terms.focal_p;
            cp += terms.center_p;
            if let (Some(a), Some(b)) = (terms.focal_c, terms.center_c) {
                child_active = true;
                fc += a;
                cc += b;
            }
        }
        let (focal_c, center_c) = if child_active {
            (Some(fc / n), Some(cc / n))
        } else {
            (None, None)
        };
        let child_total = focal_c.zip(center_c).map_or(0.0, |(a, b)| opts.lambda * (a + b));
        history.push(EpochLoss {
            epoch: first_epoch + epoch,
            focal_p: fp / n,
            center_p: cp / n,
            focal_c,
            center_c,
            total: (fp + cp) / n + child_total,
        });
    }
    Ok(history)
}

/// Pooled features of the un-augmented patches, one row per sample.
pub fn collect_features(classifier: &Classifier, patches: &[RgbImage]) -> Array2<f64> {
    let mut out = Array2::zeros((patches.len(), classifier.feature_dim()));
    for (i, p) in patches.iter().enumerate() {
        for (k, &v) in classifier.predict(p).features.iter().enumerate() {
            out[[i, k]] = v as f64;
        }
    }
    out
}

fn nearest_label(p: Point, annotated: &[(Point, Label)], radius: f64) -> Option<Label> {
    annotated
        .iter()
        .map(|(q, l)| (q.distance(&p), *l))
        .filter(|(d, _)| *d <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, l)| l)
}

/// Localizes candidates on the training split, labels them against the
/// annotated mitoses and balances negatives against positives.
pub fn build_manifest(ds: &Dataset, cfg: &PipelineConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let radius = cfg.train.positive_radius;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut candidates = 0;
    for idx in ds.indices(Split::Train) {
        let img = &ds.images[idx];
        let id = ds.id(idx).to_string();
        let annotated: Vec<(Point, Label)> = ds
            .annotations
            .points
            .iter()
            .filter(|p| p.image_id == id)
            .map(|p| (p.point(), p.label))
            .collect();
        let mitoses: Vec<Point> = annotated
            .iter()
            .filter(|(_, l)| *l == Label::Mitosis)
            .map(|(p, _)| *p)
            .collect();
        let cands = extract_candidates(&hematoxylin_channel(img, &cfg.stain.source), &cfg.localize);
        candidates += cands.len();
        let mut covered = vec![false; mitoses.len()];
        for c in &cands {
            let p = c.point();
            let hit: Vec<usize> = (0..mitoses.len())
                .filter(|&j| mitoses[j].distance(&p) <= radius)
                .collect();
            let entry = ManifestEntry {
                image_id: id.clone(),
                cx: (c.cx.round() as usize).min(img.width() - 1),
                cy: (c.cy.round() as usize).min(img.height() - 1),
                label: u8::from(!hit.is_empty()),
                origin: SampleOrigin::Candidate,
                nearest: nearest_label(p, &annotated, radius),
                cluster: None,
            };
            if hit.is_empty() {
                negatives.push(entry);
            } else {
                hit.iter().for_each(|&j| covered[j] = true);
                positives.push(entry);
            }
        }
        for (m, _) in mitoses.iter().zip(&covered).filter(|(_, c)| !**c) {
            positives.push(ManifestEntry {
                image_id: id.clone(),
                cx: (m.x.floor() as usize).min(img.width() - 1),
                cy: (m.y.floor() as usize).min(img.height() - 1),
                label: 1,
                origin: SampleOrigin::Annotation,
                nearest: Some(Label::Mitosis),
                cluster: None,
            });
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::SingleClass(format!(
            "training split has {} positive and {} negative samples",
            positives.len(),
            negatives.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SAMPLING);
    let mut stats = ManifestStats {
        candidates,
        positives: positives.len(),
        negatives: negatives.len(),
        ..Default::default()
    };
    let kept: Vec<usize> = if cfg.flags.dgsb {
        let (first, labels) = first_sampler(ds, cfg, &negatives, positives.len(), seed)?;
        for (e, &l) in negatives.iter_mut().zip(&labels) {
            e.cluster = Some(l);
        }
        stats.after_first = first.len();
        let chosen: Vec<ManifestEntry> = first.iter().map(|&i| negatives[i].clone()).collect();
        let kept: Vec<usize> = second_sampler(ds, cfg, &positives, &chosen, seed)?
            .into_iter()
            .map(|j| first[j])
            .collect();
        let k = labels.iter().max().map_or(0, |m| m + 1);
        stats.clusters = vec![ClusterStats::default(); k];
        for (e, &l) in negatives.iter().zip(&labels) {
            stats.clusters[l].size += 1;
            stats.clusters[l].hard_negatives += usize::from(e.nearest == Some(Label::HardNegative));
        }
        for &i in &first {
            stats.clusters[labels[i]].after_first += 1;
        }
        for &i in &kept {
            stats.clusters[labels[i]].after_second += 1;
        }
        kept
    } else {
        let mut idx: Vec<usize> = (0..negatives.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(positives.len());
        idx.sort_unstable();
        stats.after_first = negatives.len();
        idx
    };
    stats.after_second = kept.len();
    let mut entries = positives;
    entries.extend(kept.into_iter().map(|i| negatives[i].clone()));
    Ok(Manifest { entries, stats })
}

fn crop_entries(ds: &Dataset, entries: &[ManifestEntry], size: usize) -> Result<Vec<RgbImage>> {
    entries
        .iter()
        .map(|e| {
            let idx = (0..ds.len())
                .find(|&i| ds.id(i) == e.image_id)
                .ok_or_else(|| Error::InvalidArgument {
                    arg: "manifest",
                    reason: format!("unknown image `{}`", e.image_id),
                })?;
            Ok(crop_at(&ds.images[idx], e.cx, e.cy, size))
        })
        .collect()
}

/// Cluster-stratified sampling of the negatives. Returns the sampled indices
/// and every negative's cluster.
fn first_sampler(
    ds: &Dataset,
    cfg: &PipelineConfig,
    negatives: &[ManifestEntry],
    positives: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let crops = crop_entries(ds, negatives, cfg.patch_size)?;
    let patches: Vec<Patch> = crops
        .into_iter()
        .zip(negatives)
        .map(|(pixels, e)| Patch {
            pixels,
            source_image_id: e.image_id.clone(),
            center: (e.cx, e.cy),
        })
        .collect();
    let embedder = DefaultEmbedder {
        stain: cfg.stain.source.clone(),
        ..Default::default()
    };
    let features = embed(&patches, &embedder)?;
    let assign = kmeans(&features, cfg.dgsb.k.min(patches.len()), seed)?;
    let picked = sample_balanced(&assign, cfg.dgsb.samples_per_cluster(positives), seed);
    Ok((picked, assign.labels))
}

/// Keeps the sampled negatives a briefly trained classifier finds hard.
/// Returns indices into `negatives`. When every negative is confidently
/// rejected the single hardest one is kept so the set stays two-class.
fn second_sampler(
    ds: &Dataset,
    cfg: &PipelineConfig,
    positives: &[ManifestEntry],
    negatives: &[ManifestEntry],
    seed: u64,
) -> Result<Vec<usize>> {
    let neg_crops = crop_entries(ds, negatives, cfg.patch_size)?;
    let mut samples: Vec<TrainSample> = crop_entries(ds, positives, cfg.patch_size)?
        .into_iter()
        .map(|patch| TrainSample {
            patch,
            parent: 1,
            child: None,
        })
        .collect();
    samples.extend(neg_crops.iter().map(|p| TrainSample {
        patch: p.clone(),
        parent: 0,
        child: None,
    }));
    let diff_seed = seed ^ 0xd1ff;
    let mut model = TrainedModel::new(cfg, diff_seed);
    let opts = FitOptions {
        mix: None,
        ..FitOptions::from_config(cfg, cfg.dgsb.diff_epochs)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_DIFF);
    fit(&mut model, &samples, &opts, &mut rng, 0)?;
    let probs: Vec<f64> = neg_crops
        .iter()
        .map(|p| model.classifier.predict(p).pos_prob)
        .collect();
    let kept = difficulty_filter(&probs, cfg.dgsb.epsilon);
    if kept.is_empty() {
        let hardest = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)));
        return Ok(hardest.into_iter().collect());
    }
    Ok(kept)
}

/// Trains the final classifier on a manifest.
pub fn train_on_manifest(ds: &Dataset, manifest: &Manifest, cfg: &PipelineConfig, seed: u64) -> Result<TrainOutput> {
    cfg.validate()?;
    let positives = manifest.entries.iter().filter(|e| e.label == 1).count();
    if positives == 0 || positives == manifest.entries.len() {
        return Err(Error::SingleClass(format!(
            "manifest has {positives} positives out of {}",
            manifest.entries.len()
        )));
    }
    // repeat negatives cyclically until they match the positives in number
    let mut entries = manifest.entries.clone();
    let negatives: Vec<ManifestEntry> = entries.iter().filter(|e| e.label == 0).cloned().collect();
    entries.extend(negatives.iter().cycle().take(positives.saturating_sub(negatives.len())).cloned());
    let crops = crop_entries(ds, &entries, cfg.patch_size)?;
    let mut samples: Vec<TrainSample> = crops
        .into_iter()
        .zip(&entries)
        .map(|(patch, e)| TrainSample {
            patch,
            parent: e.label,
            child: None,
        })
        .collect();

    if cfg.flags.se {
        let restainer = StainBasisRestainer {
            source: cfg.stain.source.clone(),
            targets: cfg.stain.domains.clone(),
            gain_jitter: cfg.stain.gain_jitter,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_RESTAIN);
        let base = samples.len();
        for i in 0..base {
            for d in 0..restainer.domain_count() {
                let s = &samples[i];
                let patch = restainer.restain(&s.patch, d, rng.random());
                let parent = s.parent;
                samples.push(TrainSample {
                    patch,
                    parent,
                    child: None,
                });
            }
        }
    }

    let mut model = TrainedModel::new(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_TRAIN);
    let epochs = cfg.train.epochs;
    let history = if cfg.flags.incdp {
        let warm = cfg.train.parent_epochs;
        let mut history = fit(&mut model, &samples, &FitOptions::from_config(cfg, warm), &mut rng, 0)?;
        let patches: Vec<RgbImage> = samples.iter().map(|s| s.patch.clone()).collect();
        let features = collect_features(&model.classifier, &patches);
        let parents: Vec<u8> = samples.iter().map(|s| s.parent).collect();
        let t = cfg.incdp.t;
        let children = generate_child_labels(features.view(), &parents, t, seed)?;
        let weights = child_weights(children.centroids.view(), t, cfg.incdp.weight_clip)?;
        for (s, &c) in samples.iter_mut().zip(&children.labels) {
            s.child = Some(c);
        }
        model.classifier.attach_child_head(2 * t, seed.wrapping_add(1));
        model.centers_child = Some(Centers {
            vectors: children.centroids,
        });
        model.child_weights = Some(weights);
        history.extend(fit(
            &mut model,
            &samples,
            &FitOptions::from_config(cfg, epochs - warm),
            &mut rng,
            warm,
        )?);
        history
    } else {
        fit(&mut model, &samples, &FitOptions::from_config(cfg, epochs), &mut rng, 0)?
    };
    Ok(TrainOutput {
        model,
        history,
        stats: manifest.stats.clone(),
    })
}

/// Builds the manifest and trains on it.
pub fn train(ds: &Dataset, cfg: &PipelineConfig, seed: u64) -> Result<TrainOutput> {
    let manifest = build_manifest(ds, cfg, seed)?;
    train_on_manifest(ds, &manifest, cfg, seed)
}
