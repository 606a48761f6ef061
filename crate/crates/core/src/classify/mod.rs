//! Writer classification over pooled descriptors: a one-vs-all RBF-SVM per
//! enrolled writer, sigmoid score normalization, and score averaging up the
//! fragment → word → page chain, with optional fusion of two layers' scores.

pub mod bundle;
pub mod svm;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use svm::{sigmoid, SvmMeta, SvmModel};

use crate::util;

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("training set contains a single writer")]
    SingleClass,
    #[error("RBF gamma must be a positive finite number, got {0}")]
    DegenerateKernel(f64),
    #[error("penalty C must be positive, got {0}")]
    InvalidPenalty(f64),
    #[error("word produced no usable fragments")]
    NoFragments,
    #[error("page contains no words")]
    EmptyPage,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("score vectors cover different writer sets")]
    WriterSetMismatch,
    #[error("fusion weight must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("{0}")]
    DimMismatch(String),
}

/// Which feature stream a score came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Layer(usize),
    Fused,
}

/// Aggregation stage of a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Level {
    Fragment,
    Word,
    Page,
}

/// Per-writer scores, every entry in [0, 1]. `writers` and `scores` run in
/// parallel; the id order is whatever the producing model set used
/// (ascending, for `train_ova` output).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub writers: Vec<u32>,
    pub scores: Vec<f64>,
    pub provenance: Provenance,
    pub level: Level,
}

/// Training rows with writer labels; one L2-normalized descriptor per row.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub rows: Array2<f64>,
    pub writers: Vec<u32>,
}

impl TrainSet {
    /// Sorted, deduplicated writer ids.
    pub fn roster(&self) -> Vec<u32> {
        let mut r = self.writers.clone();
        r.sort_unstable();
        r.dedup();
        r
    }
}

/// One word's fragments (rows) and its true writer, for evaluation.
#[derive(Debug, Clone)]
pub struct WordSample {
    pub writer: u32,
    pub fragments: Array2<f64>,
}

/// Cap on negatives per one-vs-all model, as a multiple of the positives.
pub const MAX_NEG_RATIO: usize = 20;

/// Trains one binary RBF-SVM per writer (that writer positive, everyone else
/// negative), returned in ascending writer-id order. Negatives beyond
/// [`MAX_NEG_RATIO`]× the positives are subsampled with a seed derived from
/// `seed` and the writer id, so runs repeat exactly.
pub fn train_ova(
    set: &TrainSet,
    c: f64,
    gamma: f64,
    seed: u64,
) -> Result<Vec<SvmModel>, ClassifyError> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(ClassifyError::DegenerateKernel(gamma));
    }
    if !c.is_finite() || c <= 0.0 {
        return Err(ClassifyError::InvalidPenalty(c));
    }
    if set.rows.nrows() != set.writers.len() {
        return Err(ClassifyError::DimMismatch(format!(
            "{} rows vs {} labels",
            set.rows.nrows(),
            set.writers.len()
        )));
    }
    let roster = set.roster();
    if roster.len() < 2 {
        return Err(ClassifyError::SingleClass);
    }

    roster
        .par_iter()
        .map(|&w| {
            let pos: Vec<usize> =
                (0..set.writers.len()).filter(|&i| set.writers[i] == w).collect();
            let mut neg: Vec<usize> =
                (0..set.writers.len()).filter(|&i| set.writers[i] != w).collect();
            let cap = pos.len() * MAX_NEG_RATIO;
            if neg.len() > cap {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(util::derive_seed(seed, &format!("ova-neg-{w}")));
                neg.shuffle(&mut rng);
                let dropped = neg.len() - cap;
                neg.truncate(cap);
                neg.sort_unstable();
                log::info!("writer {w}: dropped {dropped} negative fragments, kept {cap}");
            }
            let mut idx = pos.clone();
            idx.extend_from_slice(&neg);
            let y: Vec<f64> = idx
                .iter()
                .map(|&i| if set.writers[i] == w { 1.0 } else { -1.0 })
                .collect();
            let sub = set.rows.select(Axis(0), &idx);
            let kernel = svm::self_kernel(sub.view(), gamma);
            let out = svm::smo(&kernel, &y, c, svm::SMO_TOL);
            let kept: Vec<usize> = (0..y.len()).filter(|&i| out.alpha[i] > 0.0).collect();
            // f32 round trip here matches the on-disk representation
            let support_vectors = sub.select(Axis(0), &kept).mapv(|v| v as f32 as f64);
            let coefs = kept.iter().map(|&i| out.alpha[i] * y[i]).collect();
            Ok(SvmModel {
                writer: w,
                support_vectors,
                coefs,
                bias: out.bias,
                c,
                gamma,
                meta: SvmMeta {
                    positives: pos.len(),
                    negatives: neg.len(),
                    iterations: out.iterations,
                    kkt_residual: out.kkt_residual,
                },
            })
        })
        .collect()
}

pub fn default_c_grid() -> Vec<f64> {
    vec![0.1, 1.0, 10.0, 100.0]
}

pub fn default_gamma_grid() -> Vec<f64> {
    (-7..=3).map(|e| 2.0f64.powi(e)).collect()
}

/// Picks the (C, gamma) pair with the best word-level top-1 on `val`. The
/// grids are swept in ascending order and only strict improvements move the
/// pick, so ties resolve to the smaller C, then the smaller gamma.
pub fn grid_search(
    train: &TrainSet,
    val: &[WordSample],
    c_grid: &[f64],
    gamma_grid: &[f64],
    seed: u64,
) -> Result<(f64, f64), ClassifyError> {
    if c_grid.is_empty() || gamma_grid.is_empty() {
        return Err(ClassifyError::EmptyGrid);
    }
    let mut cs = c_grid.to_vec();
    cs.sort_by(f64::total_cmp);
    let mut gammas = gamma_grid.to_vec();
    gammas.sort_by(f64::total_cmp);

    let mut best: Option<(f64, f64, f64)> = None;
    for &c in &cs {
        for &gamma in &gammas {
            let models = train_ova(train, c, gamma, seed)?;
            let acc = word_top1(&models, val)?;
            log::info!("grid C={c} gamma={gamma}: word top-1 {acc:.4}");
            if best.is_none_or(|(b, _, _)| acc > b) {
                best = Some((acc, c, gamma));
            }
        }
    }
    let (_, c, gamma) = best.unwrap();
    Ok((c, gamma))
}

/// Fraction of words whose averaged fragment scores rank the true writer
/// first. Words without fragments are skipped (and logged), not failed.
pub fn word_top1(models: &[SvmModel], words: &[WordSample]) -> Result<f64, ClassifyError> {
    if words.is_empty() {
        return Err(ClassifyError::EmptyValidation);
    }
    let writers: Vec<u32> = models.iter().map(|m| m.writer).collect();
    let mut hits = 0usize;
    let mut counted = 0usize;
    for word in words {
        if word.fragments.nrows() == 0 {
            log::warn!("skipping a word of writer {} with no fragments", word.writer);
            continue;
        }
        let mut means = Vec::with_capacity(models.len());
        for m in models {
            means.push(m.scores(word.fragments.view())?.mean().unwrap());
        }
        if argmax_writer(&writers, &means) == word.writer {
            hits += 1;
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(ClassifyError::EmptyValidation);
    }
    Ok(hits as f64 / counted as f64)
}

/// Sigmoid-normalized per-writer scores for every fragment row.
pub fn fragment_scores(
    models: &[SvmModel],
    fragments: ArrayView2<'_, f64>,
    provenance: Provenance,
) -> Result<Vec<ScoreVector>, ClassifyError> {
    let writers: Vec<u32> = models.iter().map(|m| m.writer).collect();
    let mut cols = Vec::with_capacity(models.len());
    for m in models {
        cols.push(m.scores(fragments)?);
    }
    Ok((0..fragments.nrows())
        .map(|i| ScoreVector {
            writers: writers.clone(),
            scores: cols.iter().map(|c| c[i]).collect(),
            provenance,
            level: Level::Fragment,
        })
        .collect())
}

fn mean_scores(
    items: &[ScoreVector],
    level: Level,
    empty: ClassifyError,
) -> Result<ScoreVector, ClassifyError> {
    let first = items.first().ok_or(empty)?;
    let mut acc = vec![0.0f64; first.scores.len()];
    for sv in items {
        if sv.writers != first.writers {
            return Err(ClassifyError::WriterSetMismatch);
        }
        for (a, &s) in acc.iter_mut().zip(&sv.scores) {
            *a += s;
        }
    }
    let n = items.len() as f64;
    Ok(ScoreVector {
        writers: first.writers.clone(),
        scores: acc.into_iter().map(|a| a / n).collect(),
        provenance: first.provenance,
        level,
    })
}

/// Per-writer mean of the fragment scores of one word.
pub fn word_score(fragments: &[ScoreVector]) -> Result<ScoreVector, ClassifyError> {
    mean_scores(fragments, Level::Word, ClassifyError::NoFragments)
}

/// Per-writer mean of the word scores on one page.
pub fn page_score(words: &[ScoreVector]) -> Result<ScoreVector, ClassifyError> {
    mean_scores(words, Level::Page, ClassifyError::EmptyPage)
}

// exact ties go to the lowest writer id, so prediction is deterministic
fn argmax_writer(writers: &[u32], scores: &[f64]) -> u32 {
    debug_assert!(!writers.is_empty());
    debug_assert_eq!(writers.len(), scores.len());
    let mut best = 0usize;
    for i in 1..scores.len() {
        if scores[i] > scores[best]
            || (scores[i] == scores[best] && writers[i] < writers[best])
        {
            best = i;
        }
    }
    writers[best]
}

pub fn predict(scores: &ScoreVector) -> u32 {
    argmax_writer(&scores.writers, &scores.scores)
}

// descending score, ascending id on ties: the ordering behind ranks and top-k
fn ranked_indices(sv: &ScoreVector) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sv.writers.len()).collect();
    idx.sort_by(|&a, &b| {
        sv.scores[b]
            .partial_cmp(&sv.scores[a])
            .unwrap()
            .then(sv.writers[a].cmp(&sv.writers[b]))
    });
    idx
}

/// 1-based rank of `writer`, or None if it is not enrolled.
pub fn rank_of(scores: &ScoreVector, writer: u32) -> Option<usize> {
    ranked_indices(scores)
        .iter()
        .position(|&i| scores.writers[i] == writer)
        .map(|p| p + 1)
}

/// The `k` best writer ids, best first.
pub fn top_ids(scores: &ScoreVector, k: usize) -> Vec<u32> {
    ranked_indices(scores).iter().take(k).map(|&i| scores.writers[i]).collect()
}

/// `alpha·P1 + (1−alpha)·P2` per writer.
pub fn fuse(
    p1: &ScoreVector,
    p2: &ScoreVector,
    alpha: f64,
) -> Result<ScoreVector, ClassifyError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ClassifyError::InvalidAlpha(alpha));
    }
    if p1.writers != p2.writers {
        return Err(ClassifyError::WriterSetMismatch);
    }
    let scores = p1
        .scores
        .iter()
        .zip(&p2.scores)
        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Ok(ScoreVector {
        writers: p1.writers.clone(),
        scores,
        provenance: Provenance::Fused,
        level: p1.level,
    })
}

/// Sweeps alpha over {0, 0.05, …, 1} and keeps the word-level top-1 winner.
/// Ties go to the alpha nearest 0.5, then the smaller one; distances are
/// compared in grid steps so the symmetry is exact.
pub fn select_alpha(
    validation: &[(ScoreVector, ScoreVector, u32)],
) -> Result<f64, ClassifyError> {
    if validation.is_empty() {
        return Err(ClassifyError::EmptyValidation);
    }
    let mut best: Option<(usize, usize)> = None; // (grid index, hits)
    for i in 0..=20usize {
        let alpha = i as f64 / 20.0;
        let mut hits = 0usize;
        for (p1, p2, truth) in validation {
            if predict(&fuse(p1, p2, alpha)?) == *truth {
                hits += 1;
            }
        }
        let dist = (i as i64 - 10).abs();
        let better = match best {
            None => true,
            Some((bi, bh)) => {
                let bdist = (bi as i64 - 10).abs();
                hits > bh || (hits == bh && (dist < bdist || (dist == bdist && i < bi)))
            }
        };
        if better {
            best = Some((i, hits));
        }
    }
    Ok(best.unwrap().0 as f64 / 20.0)
}
