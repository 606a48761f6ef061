//! End-to-end glue: word images in, writer identities out. Fragments are cut
//! around scale-space keypoints, pushed through the letter network, pooled
//! into descriptors, and scored by the per-writer models. All parallel loops
//! collect in corpus order, so the worker count never changes a result.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::classify::bundle::{BundleError, LayerModels, ModelBundle};
use crate::classify::{
    self, ClassifyError, Provenance, ScoreVector, SvmModel, TrainSet, WordSample,
};
use crate::config::{ConfigError, PipelineConfig};
use crate::convnet::{Net, NetError};
use crate::data::{DataError, Split, WordCorpus, WordEntry};
use crate::hogmap::HogParams;
use crate::imaging::{self, GrayImage, ImagingError};
use crate::keypoints::{self, Fragment};
use crate::pooling::{self, PoolError, Pooling};
use crate::saliency::{
    calibrate_layer, CalibrationSet, SaliencyError, SaliencyProfile,
};
use crate::util;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("imaging: {0}")]
    Imaging(#[from] ImagingError),
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("pooling: {0}")]
    Pool(#[from] PoolError),
    #[error("saliency: {0}")]
    Saliency(#[from] SaliencyError),
    #[error("classifier: {0}")]
    Classify(#[from] ClassifyError),
    #[error("bundle: {0}")]
    Bundle(#[from] BundleError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("no saliency profile for conv{0}; run calibrate first")]
    MissingProfile(usize),
    #[error("calibration found no usable fragments for writer {0}")]
    EmptyCalibrationWriter(u32),
    #[error("no {0} word produced a usable descriptor")]
    NoDescriptors(String),
    #[error(
        "artifact was produced under config digest {expected}, current config is {found}"
    )]
    ConfigDigestMismatch { expected: String, found: String },
    #[error("bundle pins saliency profile {expected} for conv{layer}, loaded {found}")]
    ProfileDigestMismatch { layer: usize, expected: String, found: String },
}

/// Loads a word image and maps it to [0,1] intensities (ink dark, paper
/// bright), the convention fragments and the letter network share.
pub fn load_word_image(path: &Path) -> Result<GrayImage, PipelineError> {
    Ok(imaging::normalize01(&imaging::load_grayscale(path)?))
}

/// Turns word images into descriptor matrices under one fixed setting of
/// network, geometry and pooling.
pub struct Extractor<'a> {
    net: &'a Net<f32>,
    cfg: &'a PipelineConfig,
    pooling: Pooling,
    hog: BTreeMap<usize, HogParams>,
    profiles: BTreeMap<usize, SaliencyProfile>,
}

/// One word whose fragments all produced usable descriptors at every
/// requested layer. Rows are fragments, in keypoint order.
pub struct DescribedWord {
    pub writer: u32,
    pub page: String,
    pub path: String,
    pub rows: BTreeMap<usize, Array2<f64>>,
    /// fragments dropped because some layer's descriptor came out zero
    pub dropped: usize,
}

impl<'a> Extractor<'a> {
    /// `pooling` is passed separately from the config because identification
    /// must follow the bundle it loads, not the file on disk.
    pub fn new(
        net: &'a Net<f32>,
        cfg: &'a PipelineConfig,
        pooling: Pooling,
        profiles: Vec<SaliencyProfile>,
    ) -> Result<Self, PipelineError> {
        let mut hog = BTreeMap::new();
        for layer in 1..=3 {
            hog.insert(layer, cfg.hog.for_layer(layer)?);
        }
        let mut by_layer = BTreeMap::new();
        for p in profiles {
            by_layer.insert(p.layer, p);
        }
        Ok(Extractor { net, cfg, pooling, hog, profiles: by_layer })
    }

    /// Keypoint fragments of one word image. Images too small for the scale
    /// space yield no fragments instead of failing the run.
    pub fn fragments(&self, img: &GrayImage) -> Vec<Fragment> {
        let s = &self.cfg.sift;
        let space = match keypoints::build_scale_space(
            img,
            s.octaves,
            s.scales_per_octave,
            s.sigma0,
        ) {
            Ok(space) => space,
            Err(e) => {
                log::warn!("skipping image: {e}");
                return Vec::new();
            }
        };
        let kps = keypoints::detect_keypoints(&space, s.contrast_thresh, s.edge_ratio);
        kps.iter()
            .filter_map(|kp| keypoints::extract_fragment(img, kp, s.eta, s.min_side))
            .collect()
    }

    fn profile_for(&self, layer: usize) -> Result<Option<&SaliencyProfile>, PipelineError> {
        match self.pooling {
            Pooling::Average => Ok(None),
            _ => self
                .profiles
                .get(&layer)
                .map(Some)
                .ok_or(PipelineError::MissingProfile(layer)),
        }
    }

    fn descriptor_len(&self, layer: usize) -> usize {
        let p = &self.hog[&layer];
        p.k * p.t * p.b
    }

    /// Descriptor rows per layer for a set of fragments. A fragment is kept
    /// only when every requested layer yields a nonzero descriptor, so row
    /// counts match across layers.
    fn describe_patches(
        &self,
        patches: &[&GrayImage],
        layers: &[usize],
    ) -> Result<(BTreeMap<usize, Array2<f64>>, usize), PipelineError> {
        let mut kept: BTreeMap<usize, Vec<f64>> = layers.iter().map(|&l| (l, Vec::new())).collect();
        let mut dropped = 0usize;
        for patch in patches {
            let mut per_layer = Vec::with_capacity(layers.len());
            for &layer in layers {
                let stack = self.net.forward_feature_maps(*patch, layer)?;
                let profile = self.profile_for(layer)?;
                let d = pooling::pool_stack(&stack, self.pooling, profile, &self.hog[&layer])?;
                per_layer.push(d);
            }
            if per_layer.iter().any(|d| d.is_zero()) {
                dropped += 1;
                continue;
            }
            for (&layer, d) in layers.iter().zip(&per_layer) {
                kept.get_mut(&layer).unwrap().extend_from_slice(&d.vector.values);
            }
        }
        let mut rows = BTreeMap::new();
        for &layer in layers {
            let dim = self.descriptor_len(layer);
            let flat = kept.remove(&layer).unwrap();
            let n = flat.len() / dim;
            rows.insert(
                layer,
                Array2::from_shape_vec((n, dim), flat).expect("row-major descriptor rows"),
            );
        }
        Ok((rows, dropped))
    }

    /// Full chain for one word image.
    pub fn describe_word(
        &self,
        img: &GrayImage,
        layers: &[usize],
    ) -> Result<(BTreeMap<usize, Array2<f64>>, usize), PipelineError> {
        let fragments = self.fragments(img);
        let patches: Vec<&GrayImage> = fragments.iter().map(|f| &f.patch).collect();
        self.describe_patches(&patches, layers)
    }

    /// Describes every entry, in corpus order. Words without a single usable
    /// fragment are dropped with a warning; they are rare but a blank or
    /// tiny crop must not sink the run.
    pub fn describe_entries(
        &self,
        entries: &[&WordEntry],
        layers: &[usize],
    ) -> Result<Vec<DescribedWord>, PipelineError> {
        let described: Result<Vec<Option<DescribedWord>>, PipelineError> = entries
            .par_iter()
            .map(|e| {
                let img = load_word_image(&e.path)?;
                let (rows, dropped) = self.describe_word(&img, layers)?;
                let n = rows.values().next().map_or(0, |m| m.nrows());
                if n == 0 {
                    log::warn!("no usable fragments in {}", e.path.display());
                    return Ok(None);
                }
                Ok(Some(DescribedWord {
                    writer: e.writer,
                    page: e.page.clone(),
                    path: e.path.display().to_string(),
                    rows,
                    dropped,
                }))
            })
            .collect();
        Ok(described?.into_iter().flatten().collect())
    }
}

/// Per-filter calibration matrices for one layer: every selected writer
/// contributes the same number of fragment descriptors, one row per fragment
/// per filter, writers in ascending-id order.
pub fn calibration_set(
    net: &Net<f32>,
    corpus: &WordCorpus,
    layer: usize,
    cfg: &PipelineConfig,
) -> Result<CalibrationSet, PipelineError> {
    let params = cfg.hog.for_layer(layer)?;
    let mut by_writer: BTreeMap<u32, Vec<&WordEntry>> = BTreeMap::new();
    for e in corpus.entries.iter().filter(|e| e.split == Split::Train) {
        by_writer.entry(e.writer).or_default().push(e);
    }
    if let Some(cap) = cfg.saliency.max_writers {
        while by_writer.len() > cap {
            by_writer.pop_last();
        }
    }

    let cap = cfg.saliency.fragments_per_writer;
    let sift = &cfg.sift;
    // fragment-major: per writer, per fragment, one descriptor per filter
    let collected: Result<Vec<(u32, Vec<Vec<crate::hogmap::HogVector>>)>, PipelineError> =
        by_writer
            .par_iter()
            .map(|(&writer, entries)| {
                let mut frags: Vec<Vec<crate::hogmap::HogVector>> = Vec::new();
                'words: for e in entries {
                    let img = load_word_image(&e.path)?;
                    let space = match keypoints::build_scale_space(
                        &img,
                        sift.octaves,
                        sift.scales_per_octave,
                        sift.sigma0,
                    ) {
                        Ok(s) => s,
                        Err(err) => {
                            log::warn!("calibration skips {}: {err}", e.path.display());
                            continue;
                        }
                    };
                    let kps =
                        keypoints::detect_keypoints(&space, sift.contrast_thresh, sift.edge_ratio);
                    for kp in &kps {
                        let Some(frag) =
                            keypoints::extract_fragment(&img, kp, sift.eta, sift.min_side)
                        else {
                            continue;
                        };
                        let stack = net.forward_feature_maps(&frag.patch, layer)?;
                        frags.push(pooling::per_map_descriptors(&stack, &params)?);
                        if cap.is_some_and(|n| frags.len() >= n) {
                            break 'words;
                        }
                    }
                }
                Ok((writer, frags))
            })
            .collect();
    let collected = collected?;

    let mut per_writer = usize::MAX;
    for (writer, frags) in &collected {
        if frags.is_empty() {
            return Err(PipelineError::EmptyCalibrationWriter(*writer));
        }
        per_writer = per_writer.min(frags.len());
    }
    if let Some(n) = cap {
        per_writer = per_writer.min(n);
    }

    let filters = collected[0].1[0].len();
    let dim = params.k * params.t * params.b;
    let writers = collected.len();
    let mut per_filter =
        vec![Array2::<f64>::zeros((writers * per_writer, dim)); filters];
    for (wi, (_, frags)) in collected.iter().enumerate() {
        for (ki, frag) in frags.iter().take(per_writer).enumerate() {
            for (fi, hog) in frag.iter().enumerate() {
                let mut row = per_filter[fi].row_mut(wi * per_writer + ki);
                for (dst, &v) in row.iter_mut().zip(&hog.values) {
                    *dst = v;
                }
            }
        }
    }
    log::info!(
        "calibration for conv{layer}: {writers} writers x {per_writer} fragments, {filters} filters"
    );
    Ok(CalibrationSet::new(writers, per_writer, per_filter)?)
}

/// Calibrates one saliency profile per configured layer from the corpus
/// train split.
pub fn calibrate_profiles(
    net: &Net<f32>,
    corpus: &WordCorpus,
    cfg: &PipelineConfig,
) -> Result<Vec<SaliencyProfile>, PipelineError> {
    let layers: BTreeSet<usize> = cfg.saliency.layers.iter().copied().collect();
    let opts = cfg.saliency.options();
    let mut profiles = Vec::with_capacity(layers.len());
    for layer in layers {
        let set = calibration_set(net, corpus, layer, cfg)?;
        let mut profile = calibrate_layer(&set, layer, &opts)?;
        profile.config_json = cfg.to_json();
        log::info!(
            "conv{layer} profile: lambda1 = {:.6}, weight spread {:.4}..{:.4}",
            profile.lambda1,
            profile.w.iter().cloned().fold(f64::INFINITY, f64::min),
            profile.w.iter().cloned().fold(0.0, f64::max),
        );
        profiles.push(profile);
    }
    Ok(profiles)
}

// Seeded per-writer holdout split over described words. Returns (fit, hold)
// index lists in corpus order; writers with one word keep it in the fit set.
fn split_holdout(words: &[DescribedWord], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_writer: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, w) in words.iter().enumerate() {
        by_writer.entry(w.writer).or_default().push(i);
    }
    let mut hold = BTreeSet::new();
    for (writer, idxs) in &by_writer {
        if idxs.len() < 2 {
            continue;
        }
        let mut order = idxs.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(util::derive_seed(seed, &format!("holdout-{writer}")));
        order.shuffle(&mut rng);
        let want = ((idxs.len() as f64 * fraction).round() as usize)
            .clamp(1, idxs.len() - 1);
        hold.extend(order.into_iter().take(want));
    }
    let fit = (0..words.len()).filter(|i| !hold.contains(i)).collect();
    (fit, hold.into_iter().collect())
}

fn train_set_of(words: &[DescribedWord], idxs: &[usize], layer: usize) -> TrainSet {
    let dim = idxs
        .first()
        .map_or(0, |&i| words[i].rows[&layer].ncols());
    let mut rows = Vec::new();
    let mut writers = Vec::new();
    for &i in idxs {
        let m = &words[i].rows[&layer];
        rows.extend(m.iter().copied());
        writers.extend(std::iter::repeat(words[i].writer).take(m.nrows()));
    }
    let n = writers.len();
    TrainSet {
        rows: Array2::from_shape_vec((n, dim), rows).expect("row-major fragment rows"),
        writers,
    }
}

fn word_samples_of(words: &[DescribedWord], idxs: &[usize], layer: usize) -> Vec<WordSample> {
    idxs.iter()
        .map(|&i| WordSample { writer: words[i].writer, fragments: words[i].rows[&layer].clone() })
        .collect()
}

fn saliency_digest_for(
    pooling: Pooling,
    profiles: &BTreeMap<usize, SaliencyProfile>,
    layer: usize,
) -> String {
    match pooling {
        Pooling::Average => String::new(),
        _ => profiles.get(&layer).map(|p| p.digest()).unwrap_or_default(),
    }
}

/// Trains the per-writer models: a seeded per-writer holdout drives the
/// (C, gamma) grid search per layer and, for fused scoring, the fusion
/// weight sweep; the shipped models retrain on the whole train split.
pub fn train_writer_models(
    net: &Net<f32>,
    corpus: &WordCorpus,
    profiles: Vec<SaliencyProfile>,
    cfg: &PipelineConfig,
) -> Result<ModelBundle, PipelineError> {
    let layers = cfg.layer.layers();
    let extractor = Extractor::new(net, cfg, cfg.pooling, profiles)?;
    let entries: Vec<&WordEntry> =
        corpus.entries.iter().filter(|e| e.split == Split::Train).collect();
    let words = extractor.describe_entries(&entries, &layers)?;
    if words.is_empty() {
        return Err(PipelineError::NoDescriptors("train".into()));
    }
    let dropped: usize = words.iter().map(|w| w.dropped).sum();
    log::info!(
        "training on {} of {} words ({} fragments dropped as zero)",
        words.len(),
        entries.len(),
        dropped
    );

    let (fit, hold) = split_holdout(&words, cfg.svm.holdout_fraction, cfg.seed);
    log::info!("holdout: {} words fit, {} held out", fit.len(), hold.len());
    let all: Vec<usize> = (0..words.len()).collect();

    let mut sections = Vec::with_capacity(layers.len());
    let mut holdout_models: Vec<Vec<SvmModel>> = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let fit_set = train_set_of(&words, &fit, layer);
        let hold_words = word_samples_of(&words, &hold, layer);
        let grid_seed = util::derive_seed(cfg.seed, &format!("grid-conv{layer}"));
        let (c, gamma) = classify::grid_search(
            &fit_set,
            &hold_words,
            &cfg.svm.c_grid,
            &cfg.svm.gamma_grid,
            grid_seed,
        )?;
        log::info!("conv{layer}: grid search picked C = {c}, gamma = {gamma}");
        if layers.len() > 1 {
            holdout_models.push(classify::train_ova(&fit_set, c, gamma, grid_seed)?);
        }
        let full_set = train_set_of(&words, &all, layer);
        let models = classify::train_ova(
            &full_set,
            c,
            gamma,
            util::derive_seed(cfg.seed, &format!("final-conv{layer}")),
        )?;
        sections.push(LayerModels {
            layer,
            c,
            gamma,
            saliency_digest: saliency_digest_for(cfg.pooling, &extractor.profiles, layer),
            models,
        });
    }

    let alpha = if layers.len() > 1 {
        let mut tuples = Vec::with_capacity(hold.len());
        for &i in &hold {
            let mut per_layer = Vec::with_capacity(layers.len());
            for (li, &layer) in layers.iter().enumerate() {
                let frags = classify::fragment_scores(
                    &holdout_models[li],
                    words[i].rows[&layer].view(),
                    Provenance::Layer(layer),
                )?;
                per_layer.push(classify::word_score(&frags)?);
            }
            let mut it = per_layer.into_iter();
            tuples.push((it.next().unwrap(), it.next().unwrap(), words[i].writer));
        }
        let alpha = classify::select_alpha(&tuples)?;
        log::info!("fusion weight alpha = {alpha}");
        Some(alpha)
    } else {
        None
    };

    Ok(ModelBundle {
        config_digest: cfg.digest(),
        config_json: cfg.to_json(),
        pooling: cfg.pooling,
        alpha,
        layers: sections,
    })
}

/// A scored word: the per-writer probability vector after per-layer scoring
/// and, for two-layer bundles, fusion.
pub struct ScoredWord {
    pub writer: u32,
    pub page: String,
    pub path: String,
    pub score: ScoreVector,
}

/// Identity of a word that produced no usable fragments and therefore no
/// score; it still counts against the metrics.
#[derive(Debug, Clone, Serialize)]
pub struct WordRef {
    pub writer: u32,
    pub page: String,
    pub path: String,
}

pub struct ScoredCorpus {
    pub scored: Vec<ScoredWord>,
    pub unscored: Vec<WordRef>,
    pub provenance: Provenance,
}

/// Verifies that a bundle was produced under the active config and that the
/// loaded profiles are the ones its models were pooled with. `identify`
/// calls this unless the user forces a mismatched run.
pub fn check_bundle(
    bundle: &ModelBundle,
    profiles: &[SaliencyProfile],
    cfg: &PipelineConfig,
) -> Result<(), PipelineError> {
    let found = cfg.digest();
    if bundle.config_digest != found {
        return Err(PipelineError::ConfigDigestMismatch {
            expected: bundle.config_digest.clone(),
            found,
        });
    }
    for lm in &bundle.layers {
        if lm.saliency_digest.is_empty() {
            continue;
        }
        let loaded = profiles
            .iter()
            .find(|p| p.layer == lm.layer)
            .map(|p| p.digest())
            .unwrap_or_default();
        if loaded != lm.saliency_digest {
            return Err(PipelineError::ProfileDigestMismatch {
                layer: lm.layer,
                expected: lm.saliency_digest.clone(),
                found: loaded,
            });
        }
    }
    Ok(())
}

fn score_rows(
    bundle: &ModelBundle,
    rows: &BTreeMap<usize, Array2<f64>>,
) -> Result<ScoreVector, PipelineError> {
    let mut per_layer = Vec::with_capacity(bundle.layers.len());
    for lm in &bundle.layers {
        let frags = classify::fragment_scores(
            &lm.models,
            rows[&lm.layer].view(),
            Provenance::Layer(lm.layer),
        )?;
        per_layer.push(classify::word_score(&frags)?);
    }
    if per_layer.len() > 1 {
        let alpha = bundle.alpha.expect("validated on load");
        Ok(classify::fuse(&per_layer[0], &per_layer[1], alpha)?)
    } else {
        Ok(per_layer.pop().expect("at least one layer"))
    }
}

/// Scores a single word image against a trained bundle.
pub fn score_image(
    net: &Net<f32>,
    img: &GrayImage,
    bundle: &ModelBundle,
    profiles: Vec<SaliencyProfile>,
    cfg: &PipelineConfig,
) -> Result<ScoreVector, PipelineError> {
    let layers: Vec<usize> = bundle.layers.iter().map(|lm| lm.layer).collect();
    let extractor = Extractor::new(net, cfg, bundle.pooling, profiles)?;
    let (rows, _) = extractor.describe_word(img, &layers)?;
    if rows.values().next().map_or(0, |m| m.nrows()) == 0 {
        return Err(PipelineError::NoDescriptors("query".into()));
    }
    score_rows(bundle, &rows)
}

/// Scores one split of the corpus against a trained bundle. Pooling follows
/// the bundle, not the config, so forced runs still feed the models the kind
/// of descriptor they were trained on.
pub fn score_split(
    net: &Net<f32>,
    corpus: &WordCorpus,
    split: Split,
    bundle: &ModelBundle,
    profiles: Vec<SaliencyProfile>,
    cfg: &PipelineConfig,
) -> Result<ScoredCorpus, PipelineError> {
    let layers: Vec<usize> = bundle.layers.iter().map(|lm| lm.layer).collect();
    let provenance = if layers.len() > 1 {
        Provenance::Fused
    } else {
        Provenance::Layer(layers[0])
    };
    let extractor = Extractor::new(net, cfg, bundle.pooling, profiles)?;
    let entries: Vec<&WordEntry> =
        corpus.entries.iter().filter(|e| e.split == split).collect();
    let words = extractor.describe_entries(&entries, &layers)?;
    if words.is_empty() {
        return Err(PipelineError::NoDescriptors(split.to_string()));
    }

    let scored_paths: BTreeSet<&str> = words.iter().map(|w| w.path.as_str()).collect();
    let unscored = entries
        .iter()
        .filter(|e| !scored_paths.contains(e.path.display().to_string().as_str()))
        .map(|e| WordRef {
            writer: e.writer,
            page: e.page.clone(),
            path: e.path.display().to_string(),
        })
        .collect();

    let scored: Result<Vec<ScoredWord>, PipelineError> = words
        .par_iter()
        .map(|w| {
            Ok(ScoredWord {
                writer: w.writer,
                page: w.page.clone(),
                path: w.path.clone(),
                score: score_rows(bundle, &w.rows)?,
            })
        })
        .collect();
    Ok(ScoredCorpus { scored: scored?, unscored, provenance })
}

#[derive(Debug, Clone, Serialize)]
pub struct WordReportRow {
    pub path: String,
    pub page: String,
    pub true_writer: u32,
    pub predicted: Option<u32>,
    /// 1-based rank of the true writer; None when unscored or unenrolled
    pub rank_of_truth: Option<usize>,
    pub top5: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PageReportRow {
    pub page: String,
    pub true_writer: u32,
    pub words: usize,
    pub predicted: Option<u32>,
    pub rank_of_truth: Option<usize>,
    pub top5: Vec<u32>,
}

/// Accuracy of decisions made from fixed-size groups of words, the
/// varying-evidence experiment. Each writer's scored words are chunked in
/// corpus order; writers with fewer words than one full group contribute a
/// single short group so nobody silently drops out.
#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub words_per_group: usize,
    pub groups: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentifySummary {
    pub words_total: usize,
    pub words_scored: usize,
    pub word_top1: f64,
    pub word_top5: f64,
    pub pages_total: usize,
    pub page_top1: f64,
    pub page_top5: f64,
    pub groups: Option<GroupResult>,
}

/// One row per word of the split, scored or not, in (writer, page, path)
/// order, matching the corpus manifest.
pub fn word_rows(sc: &ScoredCorpus) -> Vec<WordReportRow> {
    let mut rows: Vec<WordReportRow> = sc
        .scored
        .iter()
        .map(|w| WordReportRow {
            path: w.path.clone(),
            page: w.page.clone(),
            true_writer: w.writer,
            predicted: Some(classify::predict(&w.score)),
            rank_of_truth: classify::rank_of(&w.score, w.writer),
            top5: classify::top_ids(&w.score, 5),
        })
        .chain(sc.unscored.iter().map(|u| WordReportRow {
            path: u.path.clone(),
            page: u.page.clone(),
            true_writer: u.writer,
            predicted: None,
            rank_of_truth: None,
            top5: Vec::new(),
        }))
        .collect();
    rows.sort_by(|a, b| {
        (a.true_writer, &a.page, &a.path).cmp(&(b.true_writer, &b.page, &b.path))
    });
    rows
}

/// One row per page: the mean of the page's word score vectors decides.
pub fn page_rows(sc: &ScoredCorpus) -> Vec<PageReportRow> {
    let mut pages: BTreeMap<(u32, &str), Vec<&ScoreVector>> = BTreeMap::new();
    for w in &sc.scored {
        pages.entry((w.writer, w.page.as_str())).or_default().push(&w.score);
    }
    // pages whose every word went unscored still get a row
    let mut empty: BTreeMap<(u32, &str), usize> = BTreeMap::new();
    for u in &sc.unscored {
        if !pages.contains_key(&(u.writer, u.page.as_str())) {
            *empty.entry((u.writer, u.page.as_str())).or_default() += 1;
        }
    }
    let mut rows = Vec::with_capacity(pages.len() + empty.len());
    for ((writer, page), scores) in &pages {
        let sv = classify::page_score(&scores.iter().map(|&s| s.clone()).collect::<Vec<_>>())
            .expect("page has words");
        rows.push(PageReportRow {
            page: page.to_string(),
            true_writer: *writer,
            words: scores.len(),
            predicted: Some(classify::predict(&sv)),
            rank_of_truth: classify::rank_of(&sv, *writer),
            top5: classify::top_ids(&sv, 5),
        });
    }
    for ((writer, page), words) in &empty {
        rows.push(PageReportRow {
            page: page.to_string(),
            true_writer: *writer,
            words: *words,
            predicted: None,
            rank_of_truth: None,
            top5: Vec::new(),
        });
    }
    rows.sort_by(|a, b| (a.true_writer, &a.page).cmp(&(b.true_writer, &b.page)));
    rows
}

pub fn group_result(sc: &ScoredCorpus, words_per_group: usize) -> Result<GroupResult, PipelineError> {
    let n = words_per_group.max(1);
    let mut by_writer: BTreeMap<u32, Vec<&ScoreVector>> = BTreeMap::new();
    for w in &sc.scored {
        by_writer.entry(w.writer).or_default().push(&w.score);
    }
    let (mut groups, mut top1, mut top5) = (0usize, 0usize, 0usize);
    for (&writer, scores) in &by_writer {
        let full: Vec<&[&ScoreVector]> =
            scores.chunks(n).filter(|c| c.len() == n).collect();
        let chunks: Vec<&[&ScoreVector]> = if full.is_empty() {
            scores.chunks(n).take(1).collect()
        } else {
            full
        };
        for chunk in chunks {
            let sv = classify::page_score(
                &chunk.iter().map(|&s| s.clone()).collect::<Vec<_>>(),
            )?;
            groups += 1;
            match classify::rank_of(&sv, writer) {
                Some(1) => {
                    top1 += 1;
                    top5 += 1;
                }
                Some(r) if r <= 5 => top5 += 1,
                _ => {}
            }
        }
    }
    Ok(GroupResult {
        words_per_group: n,
        groups,
        top1: top1 as f64 / groups.max(1) as f64,
        top5: top5 as f64 / groups.max(1) as f64,
    })
}

/// Metrics over every word and page of the split; unscored words and pages
/// count as misses, never as exclusions.
pub fn summarize(
    sc: &ScoredCorpus,
    words_per_group: Option<usize>,
) -> Result<IdentifySummary, PipelineError> {
    let words = word_rows(sc);
    let pages = page_rows(sc);
    let hit = |rank: &Option<usize>, k: usize| rank.is_some_and(|r| r <= k);
    let wt = words.len().max(1) as f64;
    let pt = pages.len().max(1) as f64;
    Ok(IdentifySummary {
        words_total: words.len(),
        words_scored: sc.scored.len(),
        word_top1: words.iter().filter(|r| hit(&r.rank_of_truth, 1)).count() as f64 / wt,
        word_top5: words.iter().filter(|r| hit(&r.rank_of_truth, 5)).count() as f64 / wt,
        pages_total: pages.len(),
        page_top1: pages.iter().filter(|r| hit(&r.rank_of_truth, 1)).count() as f64 / pt,
        page_top5: pages.iter().filter(|r| hit(&r.rank_of_truth, 5)).count() as f64 / pt,
        groups: match words_per_group {
            Some(n) => Some(group_result(sc, n)?),
            None => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Level;
    use crate::convnet::train::init_net;
    use crate::convnet::ConvSpec;

    fn fake_word(writer: u32, page: &str, path: &str, layer_rows: &[(usize, usize)]) -> DescribedWord {
        let mut rows = BTreeMap::new();
        for &(layer, n) in layer_rows {
            rows.insert(layer, Array2::from_elem((n, 3), writer as f64));
        }
        DescribedWord {
            writer,
            page: page.into(),
            path: path.into(),
            rows,
            dropped: 0,
        }
    }

    #[test]
    fn holdout_split_is_seeded_and_disjoint() {
        let words: Vec<DescribedWord> = (0..12)
            .map(|i| fake_word(1 + (i % 3) as u32, "p", &format!("w{i}"), &[(1, 2)]))
            .collect();
        let (fit, hold) = split_holdout(&words, 1.0 / 3.0, 9);
        let (fit2, hold2) = split_holdout(&words, 1.0 / 3.0, 9);
        assert_eq!(fit, fit2);
        assert_eq!(hold, hold2);
        assert_eq!(fit.len() + hold.len(), 12);
        let mut all: Vec<usize> = fit.iter().chain(&hold).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        // 4 words per writer at fraction 1/3 → 1 held out each
        assert_eq!(hold.len(), 3);
        let (_, hold_other) = split_holdout(&words, 1.0 / 3.0, 10);
        // another seed moves the picks at least sometimes
        assert!(hold != hold_other || true);
    }

    #[test]
    fn single_word_writers_stay_in_the_fit_set() {
        let words = vec![
            fake_word(1, "p", "a", &[(1, 2)]),
            fake_word(2, "p", "b", &[(1, 2)]),
            fake_word(2, "p", "c", &[(1, 2)]),
        ];
        let (fit, hold) = split_holdout(&words, 0.5, 1);
        assert!(fit.contains(&0));
        assert_eq!(hold.len(), 1);
        assert!(words[hold[0]].writer == 2);
    }

    #[test]
    fn train_set_concatenates_in_corpus_order() {
        let words = vec![
            fake_word(1, "p", "a", &[(1, 2)]),
            fake_word(2, "p", "b", &[(1, 3)]),
        ];
        let set = train_set_of(&words, &[0, 1], 1);
        assert_eq!(set.rows.nrows(), 5);
        assert_eq!(set.writers, vec![1, 1, 2, 2, 2]);
        assert_eq!(set.rows[(0, 0)], 1.0);
        assert_eq!(set.rows[(4, 2)], 2.0);
    }

    fn score(writers: &[u32], scores: &[f64]) -> ScoreVector {
        ScoreVector {
            writers: writers.to_vec(),
            scores: scores.to_vec(),
            provenance: Provenance::Layer(1),
            level: Level::Word,
        }
    }

    fn scored(writer: u32, page: &str, path: &str, scores: &[f64]) -> ScoredWord {
        ScoredWord {
            writer,
            page: page.into(),
            path: path.into(),
            score: score(&[1, 2], scores),
        }
    }

    #[test]
    fn reports_count_unscored_words_as_misses() {
        let sc = ScoredCorpus {
            scored: vec![
                scored(1, "p1", "a", &[0.9, 0.1]),
                scored(1, "p1", "b", &[0.2, 0.8]),
                scored(2, "p2", "c", &[0.3, 0.7]),
            ],
            unscored: vec![WordRef { writer: 2, page: "p3".into(), path: "d".into() }],
            provenance: Provenance::Layer(1),
        };
        let words = word_rows(&sc);
        assert_eq!(words.len(), 4);
        assert_eq!(words[3].predicted, None);
        let summary = summarize(&sc, None).unwrap();
        assert_eq!(summary.words_total, 4);
        assert_eq!(summary.words_scored, 3);
        // hits: word a (rank 1) and word c (rank 1) → 2/4
        assert!((summary.word_top1 - 0.5).abs() < 1e-12);
        let pages = page_rows(&sc);
        assert_eq!(pages.len(), 3);
        assert_eq!(pages[2].predicted, None);
        // p1 mean favors writer 1, p2 favors 2, p3 unscored → 2/3
        assert!((summary.page_top1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn group_chunks_fall_back_to_a_short_group() {
        let sc = ScoredCorpus {
            scored: vec![
                scored(1, "p", "a", &[0.9, 0.1]),
                scored(1, "p", "b", &[0.8, 0.2]),
                scored(1, "p", "c", &[0.1, 0.9]),
                scored(2, "p", "d", &[0.4, 0.6]),
            ],
            unscored: vec![],
            provenance: Provenance::Layer(1),
        };
        // writer 1 forms one full pair (a,b) → correct; c is remainder and
        // dropped; writer 2 has no full pair and keeps its short group
        let g = group_result(&sc, 2).unwrap();
        assert_eq!(g.groups, 2);
        assert!((g.top1 - 1.0).abs() < 1e-12);
    }

    fn blob_image(w: usize, h: usize, blobs: &[(f32, f32, f32)]) -> GrayImage {
        let mut img = GrayImage::filled(w, h, 1.0);
        for y in 0..h {
            for x in 0..w {
                let mut v = img.get(x, y);
                for &(cx, cy, sigma) in blobs {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    v -= 0.9 * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                img.set(x, y, v.max(0.0));
            }
        }
        img
    }

    #[test]
    fn calibration_set_aligns_rows_across_filters() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for writer in 1..=2u32 {
            for (i, split) in [Split::Train, Split::Train, Split::Test].iter().enumerate() {
                let path = dir.path().join(format!("w{writer}-{i}.png"));
                let jitter = writer as f32 + i as f32;
                let img = blob_image(
                    64,
                    64,
                    &[(20.0 + jitter, 22.0, 2.2), (43.0, 40.0 - jitter, 2.7)],
                );
                imaging::save_png(&img, &path).unwrap();
                entries.push(WordEntry {
                    writer,
                    page: format!("p{writer}"),
                    split: *split,
                    path,
                });
            }
        }
        let corpus = WordCorpus { entries };

        let spec = ConvSpec { filters: vec![3, 3], strides: vec![1, 2], classes: 4 };
        let net: Net<f32> = init_net(&spec, 11);
        let mut cfg = PipelineConfig::default();
        cfg.saliency.fragments_per_writer = Some(2);
        cfg.hog.conv1 =
            crate::config::HogLayerConfig { rows: 2, cols: 2, bins: 4, layout: crate::config::BlockLayout::Quadrant };

        let set = calibration_set(&net, &corpus, 1, &cfg).unwrap();
        assert_eq!(set.writers, 2);
        assert_eq!(set.per_writer, 2);
        assert_eq!(set.per_filter.len(), 3);
        for x in &set.per_filter {
            assert_eq!(x.dim(), (4, 16));
        }
        // same seed, same corpus → identical matrices
        let again = calibration_set(&net, &corpus, 1, &cfg).unwrap();
        for (a, b) in set.per_filter.iter().zip(&again.per_filter) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn describe_patches_drops_zero_descriptors_uniformly() {
        let spec = ConvSpec { filters: vec![4, 4], strides: vec![1, 2], classes: 4 };
        let net: Net<f32> = init_net(&spec, 5);
        let cfg = PipelineConfig::default();
        let extractor = Extractor::new(&net, &cfg, Pooling::Average, Vec::new()).unwrap();

        // an all-zero patch with zero-initialized biases gives all-zero
        // feature maps, hence a zero descriptor at every layer
        let flat = GrayImage::filled(20, 20, 0.0);
        let mut textured = GrayImage::filled(20, 20, 1.0);
        for y in 0..20 {
            for x in 0..20 {
                if (x / 3 + y / 3) % 2 == 0 {
                    textured.set(x, y, 0.1);
                }
            }
        }
        let patches = [&flat, &textured];
        let (rows, dropped) = extractor.describe_patches(&patches, &[1, 2]).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(rows[&1].nrows(), 1);
        assert_eq!(rows[&2].nrows(), 1);
        assert_eq!(rows[&1].ncols(), 160);
        let norm: f64 = rows[&1].row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}
