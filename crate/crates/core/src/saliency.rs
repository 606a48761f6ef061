//! Per-filter saliency weights for one convolution layer. For every filter,
//! the descriptor vectors of a calibration population are reduced with a
//! sparse PCA (elastic-net regression formulation), the projection
//! coefficients are histogrammed per writer, and the mean histogram entropy
//! becomes the filter's saliency; weights are the entropies normalized to
//! sum 1. High entropy means the filter's response spreads writers apart.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum SaliencyError {
    #[error("matrix rank {rank} below requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Descriptor vectors of a calibration population: for each filter, one
/// (writers * per_writer) x dim matrix with rows grouped writer-major.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub writers: usize,
    /// rows per writer; every writer contributes the same number
    pub per_writer: usize,
    pub per_filter: Vec<Array2<f64>>,
}

impl CalibrationSet {
    pub fn new(
        writers: usize,
        per_writer: usize,
        per_filter: Vec<Array2<f64>>,
    ) -> Result<Self, SaliencyError> {
        if writers == 0 || per_writer == 0 || per_filter.is_empty() {
            return Err(SaliencyError::InvalidParams(
                "calibration set needs writers, rows and filters".into(),
            ));
        }
        let rows = writers * per_writer;
        let dim = per_filter[0].ncols();
        for (f, x) in per_filter.iter().enumerate() {
            if x.nrows() != rows || x.ncols() != dim {
                return Err(SaliencyError::DimMismatch(format!(
                    "filter {f}: {}x{} rows, expected {rows}x{dim}",
                    x.nrows(),
                    x.ncols()
                )));
            }
        }
        Ok(CalibrationSet { writers, per_writer, per_filter })
    }

    pub fn filters(&self) -> usize {
        self.per_filter.len()
    }
}

/// Unit-norm sparse loading matrix for one filter.
#[derive(Debug, Clone)]
pub struct SparseLoadings {
    /// dim x components, each column unit norm or all-zero
    pub v_hat: Array2<f64>,
    pub lambda: f64,
    pub lambda1: f64,
    /// fraction of exactly-zero entries per column
    pub sparsity: Vec<f64>,
    /// columns whose regression collapsed to zero
    pub zero_columns: Vec<bool>,
}

/// Per-filter mean entropies and their normalization to weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SaliencyProfile {
    pub format: String,
    /// 1-based convolution layer the profile was calibrated for
    pub layer: usize,
    /// mean coefficient-histogram entropy per filter, in [0, log2 bins]
    pub phi: Vec<f64>,
    /// phi normalized to sum 1
    pub w: Vec<f64>,
    pub bins: usize,
    pub components: usize,
    pub writers: usize,
    pub per_writer: usize,
    pub lambda: f64,
    pub lambda1: f64,
    /// run configuration the profile was calibrated under, JSON; provenance
    /// only, set by the pipeline and absent in bare library use
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub config_json: String,
}

pub const PROFILE_FORMAT: &str = "saliency/1";

impl SaliencyProfile {
    pub fn filters(&self) -> usize {
        self.w.len()
    }

    /// Stable content digest used by model files to pin their profile.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("profile serializes");
        crate::util::digest_hex(json.as_bytes())
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("profile serializes");
        std::fs::write(path, json)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SaliencyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SaliencyError::InvalidParams(format!("read profile: {e}")))?;
        let profile: SaliencyProfile = serde_json::from_str(&text)
            .map_err(|e| SaliencyError::InvalidParams(format!("parse profile: {e}")))?;
        if profile.format != PROFILE_FORMAT {
            return Err(SaliencyError::InvalidParams(format!(
                "unsupported profile format {:?}",
                profile.format
            )));
        }
        Ok(profile)
    }
}

#[derive(Debug, Clone)]
pub struct SaliencyOptions {
    pub components: usize,
    pub bins: usize,
    pub lambda: f64,
    /// None selects lambda1 by bisection toward `target_sparsity`
    pub lambda1: Option<f64>,
    pub target_sparsity: f64,
    pub iters: usize,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        SaliencyOptions {
            components: 8,
            bins: 16,
            lambda: 1e-4,
            lambda1: None,
            target_sparsity: 0.5,
            iters: 200,
        }
    }
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut c = x.clone();
    for mut col in c.columns_mut() {
        let mean = col.sum() / col.len() as f64;
        col.mapv_inplace(|v| v - mean);
    }
    c
}

/// Eigenvalues (descending) and eigenvectors of a symmetric Gram matrix.
fn gram_eigen(g: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let dim = g.nrows();
    let m = nalgebra::DMatrix::from_fn(dim, dim, |r, c| g[(r, c)]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Array2::<f64>::zeros((dim, dim));
    for (col, &i) in order.iter().enumerate() {
        for r in 0..dim {
            vecs[(r, col)] = eig.eigenvectors[(r, i)];
        }
    }
    (vals, vecs)
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Core alternation on a centered Gram matrix; `components` must not exceed
/// the usable rank (the caller checks). Convergence is judged on the
/// bi-convex objective; near the sparsity transition the active set can flip
/// back and forth in a small limit cycle, so `iters` is a budget and the
/// best iterate wins rather than the run failing.
fn spca_on_gram(
    g: &Array2<f64>,
    init: &Array2<f64>,
    components: usize,
    lambda: f64,
    lambda1: f64,
    iters: usize,
) -> Array2<f64> {
    let dim = g.nrows();
    let gmax = (0..dim).map(|j| g[(j, j)]).fold(0.0f64, f64::max);
    let gtrace: f64 = (0..dim).map(|j| g[(j, j)]).sum();
    let mut a = init.slice(ndarray::s![.., ..components]).to_owned();
    let mut b = Array2::<f64>::zeros((dim, components));
    let mut best: Option<(f64, Array2<f64>)> = None;
    let mut stale = 0usize;
    let mut prev_obj = f64::INFINITY;
    let mut last_delta = f64::INFINITY;
    let mut converged = false;

    for _ in 0..iters {
        // B-step: one elastic-net regression per component, coordinate
        // descent with an incrementally maintained q = G b
        let mut obj = gtrace;
        for l in 0..components {
            let a_l = a.column(l).to_owned();
            let target = g.dot(&a_l);
            let mut beta = b.column(l).to_owned();
            if beta.iter().all(|&v| v == 0.0) {
                // warm start at the ridge solution along the response; plain
                // coordinate descent from zero stalls on rank-deficient data
                let mu = a_l.dot(&target);
                if mu > 0.0 {
                    beta = &a_l * (mu / (mu + lambda));
                }
            }
            let mut q = g.dot(&beta);
            {
                let q = q.as_slice_mut().expect("q is contiguous");
                for _sweep in 0..200 {
                    let mut max_delta = 0.0f64;
                    for j in 0..dim {
                        let gjj = g[(j, j)];
                        // G is symmetric, so row j is the contiguous view of
                        // column j; the axpy below is the hot path
                        let grow = g.row(j);
                        let grow = grow.as_slice().expect("gram rows are contiguous");
                        // a coordinate with no data variance cannot contribute;
                        // skipping it avoids amplifying cancellation noise by 1/lambda
                        if gjj <= gmax * 1e-12 {
                            if beta[j] != 0.0 {
                                let delta = -beta[j];
                                for (qi, gi) in q.iter_mut().zip(grow) {
                                    *qi += gi * delta;
                                }
                                beta[j] = 0.0;
                            }
                            continue;
                        }
                        let r = target[j] - q[j] + gjj * beta[j];
                        let new = soft(r, lambda1 / 2.0) / (gjj + lambda);
                        let delta = new - beta[j];
                        if delta != 0.0 {
                            for (qi, gi) in q.iter_mut().zip(grow) {
                                *qi += gi * delta;
                            }
                            beta[j] = new;
                            max_delta = max_delta.max(delta.abs());
                        }
                    }
                    if max_delta <= 1e-12 * (1.0 + gmax) {
                        break;
                    }
                }
            }
            // ||X - X B A^T||^2 + lambda ||B||^2 + lambda1 ||B||_1 via the
            // Gram; tr(G) is added once outside this loop
            let atb = a_l.dot(&q);
            let btb = beta.dot(&q);
            let l2: f64 = beta.iter().map(|v| v * v).sum();
            let l1: f64 = beta.iter().map(|v| v.abs()).sum();
            obj += -2.0 * atb + btb + lambda * l2 + lambda1 * l1;
            b.column_mut(l).assign(&beta);
        }

        // done when the objective stops making meaningful progress against
        // the best value seen: covers converged runs, slow flat-valley
        // tails, and active-set limit cycles alike
        last_delta = (prev_obj - obj).abs();
        prev_obj = obj;
        if best.as_ref().is_none_or(|(o, _)| obj < *o - 1e-8 * (1.0 + obj.abs())) {
            best = Some((obj, b.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= 8 {
                converged = true;
                break;
            }
        }

        // A-step: polar factor of G B restores orthonormal responses
        let gb = g.dot(&b);
        let m = nalgebra::DMatrix::from_fn(dim, components, |r, c| gb[(r, c)]);
        let svd = nalgebra::SVD::new(m, true, true);
        let u = svd.u.as_ref().expect("requested U");
        let vt = svd.v_t.as_ref().expect("requested Vt");
        let polar = u * vt;
        for l in 0..components {
            for r in 0..dim {
                a[(r, l)] = polar[(r, l)];
            }
        }
    }
    if !converged {
        log::debug!(
            "sparse PCA spent its {iters}-iteration budget at objective delta \
             {last_delta:.3e} (lambda1 {lambda1:.3e}); keeping the best iterate"
        );
    }
    best.map(|(_, bb)| bb).unwrap_or(b)
}

fn normalize_loadings(b: Array2<f64>, lambda: f64, lambda1: f64) -> SparseLoadings {
    let (dim, components) = b.dim();
    let mut v_hat = b;
    let mut sparsity = Vec::with_capacity(components);
    let mut zero_columns = Vec::with_capacity(components);
    for l in 0..components {
        let mut col = v_hat.column_mut(l);
        let zeros = col.iter().filter(|v| **v == 0.0).count();
        sparsity.push(zeros as f64 / dim as f64);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
            zero_columns.push(false);
        } else {
            zero_columns.push(true);
        }
    }
    SparseLoadings { v_hat, lambda, lambda1, sparsity, zero_columns }
}

/// Rank of the Gram matrix judged against its largest eigenvalue.
fn usable_rank(eigvals: &[f64]) -> usize {
    let max = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    if max <= 0.0 {
        return 0;
    }
    eigvals.iter().filter(|&&v| v > max * 1e-12).count()
}

/// Sparse loadings of the top `components` principal directions of
/// column-centered `x`, via the regression formulation: each PCA response is
/// re-fit with ridge + lasso penalties by coordinate descent, alternating
/// with a polar-factor refresh of the responses.
pub fn sparse_pca(
    x: &Array2<f64>,
    components: usize,
    lambda: f64,
    lambda1: f64,
    iters: usize,
) -> Result<SparseLoadings, SaliencyError> {
    if components == 0 {
        return Err(SaliencyError::InvalidParams("components must be >= 1".into()));
    }
    if x.nrows() < components {
        return Err(SaliencyError::RankDeficient { rank: x.nrows(), requested: components });
    }
    let xc = center_columns(x);
    let g = xc.t().dot(&xc);
    let (vals, vecs) = gram_eigen(&g);
    let rank = usable_rank(&vals);
    if rank < components {
        return Err(SaliencyError::RankDeficient { rank, requested: components });
    }
    let b = spca_on_gram(&g, &vecs, components, lambda, lambda1, iters);
    Ok(normalize_loadings(b, lambda, lambda1))
}

/// Projection coefficients alpha = X V̂ (rows keep their writer grouping).
pub fn project(x: &Array2<f64>, loadings: &SparseLoadings) -> Result<Array2<f64>, SaliencyError> {
    if x.ncols() != loadings.v_hat.nrows() {
        return Err(SaliencyError::DimMismatch(format!(
            "X has {} columns, loadings expect {}",
            x.ncols(),
            loadings.v_hat.nrows()
        )));
    }
    Ok(x.dot(&loadings.v_hat))
}

/// Per-writer, per-component histograms of projection coefficients,
/// normalized to distributions. Bin edges are `bins` equal-width intervals
/// over the global [min, max] of each component (rightmost edge inclusive);
/// a constant component degenerates to a point mass in the first bin.
pub fn coefficient_histograms(
    alpha: &Array2<f64>,
    writers: usize,
    per_writer: usize,
    bins: usize,
) -> Result<Array3<f64>, SaliencyError> {
    if bins < 2 {
        return Err(SaliencyError::InvalidParams("bins must be >= 2".into()));
    }
    if alpha.nrows() != writers * per_writer {
        return Err(SaliencyError::DimMismatch(format!(
            "alpha has {} rows, expected writers*per_writer = {}",
            alpha.nrows(),
            writers * per_writer
        )));
    }
    let components = alpha.ncols();
    let mut p = Array3::<f64>::zeros((writers, components, bins));
    for j in 0..components {
        let col = alpha.column(j);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        for i in 0..writers {
            for k in 0..per_writer {
                let v = alpha[(i * per_writer + k, j)];
                let bin = if width > 0.0 {
                    (((v - lo) / width).floor() as usize).min(bins - 1)
                } else {
                    0
                };
                p[(i, j, bin)] += 1.0;
            }
            for b in 0..bins {
                p[(i, j, b)] /= per_writer as f64;
            }
        }
    }
    Ok(p)
}

/// Entropy of one distribution in bits, with 0 log 0 = 0.
fn entropy_bits(p: ndarray::ArrayView1<f64>) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum()
}

/// Mean histogram entropy per filter and the normalized weights. When every
/// filter has zero entropy the weights fall back to uniform with a warning.
pub fn entropy_and_weights(
    per_filter_p: &[Array3<f64>],
    layer: usize,
    opts: &SaliencyOptions,
    writers: usize,
    per_writer: usize,
    lambda1: f64,
) -> Result<SaliencyProfile, SaliencyError> {
    if per_filter_p.is_empty() {
        return Err(SaliencyError::InvalidParams("no filters".into()));
    }
    let filters = per_filter_p.len();
    let mut phi = Vec::with_capacity(filters);
    for p in per_filter_p {
        let (w_count, _, _) = p.dim();
        let mut total = 0.0;
        for i in 0..w_count {
            for j in 0..p.dim().1 {
                total += entropy_bits(p.index_axis(ndarray::Axis(0), i).row(j));
            }
        }
        // denominator is writers * requested components even if a filter
        // supported fewer usable directions; missing directions carry no
        // writer information
        phi.push(total / (writers as f64 * opts.components as f64));
    }
    let sum: f64 = phi.iter().sum();
    let w = if sum > 0.0 {
        phi.iter().map(|&v| v / sum).collect()
    } else {
        log::warn!("all {filters} filters have zero entropy; falling back to uniform weights");
        vec![1.0 / filters as f64; filters]
    };
    Ok(SaliencyProfile {
        format: PROFILE_FORMAT.into(),
        layer,
        phi,
        w,
        bins: opts.bins,
        components: opts.components,
        writers,
        per_writer,
        lambda: opts.lambda,
        lambda1,
        config_json: String::new(),
    })
}

/// Mean loading sparsity of up to three representative filters at a given
/// lambda1, used by the bisection below.
fn mean_sparsity_at(
    sample: &[&Array2<f64>],
    components: usize,
    lambda: f64,
    lambda1: f64,
    iters: usize,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for x in sample {
        let xc = center_columns(x);
        let g = xc.t().dot(&xc);
        let (vals, vecs) = gram_eigen(&g);
        let rank = usable_rank(&vals).min(components);
        if rank == 0 {
            continue;
        }
        let b = spca_on_gram(&g, &vecs, rank, lambda, lambda1, iters);
        let loadings = normalize_loadings(b, lambda, lambda1);
        total += loadings.sparsity.iter().sum::<f64>() / rank as f64;
        n += 1;
    }
    if n == 0 {
        // every sample filter was rank-zero (dead maps); report "not
        // sparse" so the search settles at the low end
        0.0
    } else {
        total / n as f64
    }
}

/// Bisects lambda1 until the mean loading sparsity on up to three
/// representative filters reaches the target fraction.
pub fn choose_lambda1(set: &CalibrationSet, opts: &SaliencyOptions) -> f64 {
    let f = set.filters();
    let mut picks = vec![0usize];
    if f > 2 {
        picks.push(f / 2);
    }
    if f > 1 {
        picks.push(f - 1);
    }
    let sample: Vec<&Array2<f64>> = picks.iter().map(|&i| &set.per_filter[i]).collect();

    // upper bound: the largest soft threshold any coordinate sees at beta=0
    let mut hi = 0.0f64;
    for x in &sample {
        let xc = center_columns(x);
        let g = xc.t().dot(&xc);
        let (vals, vecs) = gram_eigen(&g);
        let rank = usable_rank(&vals).min(opts.components);
        for l in 0..rank {
            let t = g.dot(&vecs.column(l));
            hi = hi.max(t.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 2.0);
        }
    }
    if hi <= 0.0 {
        return 0.0;
    }
    // probes run on a quarter of the fit budget: the sparsity level settles
    // long before the loadings do, and only the level steers the search
    let probe_iters = (opts.iters / 4).max(20);
    let mut lo = 0.0f64;
    for _ in 0..16 {
        let mid = 0.5 * (lo + hi);
        let s = mean_sparsity_at(&sample, opts.components, opts.lambda, mid, probe_iters);
        if s < opts.target_sparsity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Full calibration for one layer: per filter, sparse PCA on the filter's
/// descriptor matrix, projection, per-writer histograms; then entropies are
/// aggregated into weights. Filters whose data is rank-deficient (dead or
/// near-constant maps) contribute the components their rank supports, down
/// to zero entropy for fully dead ones.
pub fn calibrate_layer(
    set: &CalibrationSet,
    layer: usize,
    opts: &SaliencyOptions,
) -> Result<SaliencyProfile, SaliencyError> {
    if opts.components == 0 || opts.bins < 2 {
        return Err(SaliencyError::InvalidParams(
            "need components >= 1 and bins >= 2".into(),
        ));
    }
    if set.writers * set.per_writer < opts.components {
        return Err(SaliencyError::RankDeficient {
            rank: set.writers * set.per_writer,
            requested: opts.components,
        });
    }
    let lambda1 = match opts.lambda1 {
        Some(v) => v,
        None => choose_lambda1(set, opts),
    };

    let per_filter_p: Vec<Array3<f64>> = set
        .per_filter
        .par_iter()
        .enumerate()
        .map(|(fi, x)| {
            let xc = center_columns(x);
            let g = xc.t().dot(&xc);
            let (vals, vecs) = gram_eigen(&g);
            let rank = usable_rank(&vals).min(opts.components);
            if rank == 0 {
                log::warn!("filter {fi}: constant descriptor data, zero entropy");
                return Ok(Array3::<f64>::zeros((set.writers, 0, opts.bins)));
            }
            let b = spca_on_gram(&g, &vecs, rank, opts.lambda, lambda1, opts.iters);
            let loadings = normalize_loadings(b, opts.lambda, lambda1);
            let alpha = project(x, &loadings)?;
            coefficient_histograms(&alpha, set.writers, set.per_writer, opts.bins)
        })
        .collect::<Result<Vec<_>, SaliencyError>>()?;

    entropy_and_weights(&per_filter_p, layer, opts, set.writers, set.per_writer, lambda1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn unpenalized_loadings_match_eigenvectors() {
        for seed in 0..4 {
            let x = random_matrix(20, 8, seed);
            let loadings = sparse_pca(&x, 8, 1e-6, 0.0, 200).unwrap();
            let xc = center_columns(&x);
            let g = xc.t().dot(&xc);
            let (_, vecs) = gram_eigen(&g);
            for l in 0..8 {
                let cos: f64 = loadings
                    .v_hat
                    .column(l)
                    .iter()
                    .zip(vecs.column(l).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(cos.abs() >= 0.999, "seed {seed} component {l}: |cos| = {}", cos.abs());
            }
        }
    }

    #[test]
    fn large_penalty_produces_sparse_loadings() {
        // two duplicated informative columns plus noise columns
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Array2::<f64>::zeros((60, 10));
        for r in 0..60 {
            let signal: f64 = rng.gen_range(-2.0..2.0);
            x[(r, 0)] = signal + rng.gen_range(-0.01..0.01);
            x[(r, 1)] = signal + rng.gen_range(-0.01..0.01);
            for c in 2..10 {
                x[(r, c)] = rng.gen_range(-0.05..0.05);
            }
        }
        let dense = sparse_pca(&x, 1, 1e-4, 0.0, 200).unwrap();
        assert!(dense.sparsity[0] < 0.5);
        let xc = center_columns(&x);
        let g = xc.t().dot(&xc);
        let scale = (0..10).map(|j| g[(j, j)]).fold(0.0f64, f64::max);
        let sparse = sparse_pca(&x, 1, 1e-4, scale * 0.5, 200).unwrap();
        assert!(
            sparse.sparsity[0] >= 0.5,
            "sparsity {} with threshold {}",
            sparse.sparsity[0],
            scale * 0.5
        );
    }

    #[test]
    fn rank_one_data_recovers_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = [0.6f64, -0.8, 0.0, 0.0, 0.0];
        let mut x = Array2::<f64>::zeros((30, 5));
        for r in 0..30 {
            let c: f64 = rng.gen_range(-1.0..1.0);
            for j in 0..5 {
                x[(r, j)] = c * gen[j];
            }
        }
        let loadings = sparse_pca(&x, 1, 1e-8, 0.0, 200).unwrap();
        let cos: f64 = loadings.v_hat.column(0).iter().zip(&gen).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 0.9999, "|cos| = {}", cos.abs());
    }

    #[test]
    fn rank_deficiency_is_reported() {
        // constant matrix centers to zero
        let x = Array2::<f64>::from_elem((10, 4), 3.0);
        assert!(matches!(
            sparse_pca(&x, 2, 1e-4, 0.0, 100),
            Err(SaliencyError::RankDeficient { rank: 0, .. })
        ));
        // more components than rows
        let x = random_matrix(3, 8, 1);
        assert!(matches!(
            sparse_pca(&x, 5, 1e-4, 0.0, 100),
            Err(SaliencyError::RankDeficient { .. })
        ));
    }

    #[test]
    fn projection_is_literal_matrix_product() {
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [4.0, 5.0, 6.0]];
        let mut v = Array2::<f64>::zeros((3, 2));
        v[(0, 0)] = 1.0;
        v[(2, 1)] = 1.0;
        let loadings = SparseLoadings {
            v_hat: v,
            lambda: 0.0,
            lambda1: 0.0,
            sparsity: vec![2.0 / 3.0; 2],
            zero_columns: vec![false; 2],
        };
        let alpha = project(&x, &loadings).unwrap();
        assert_eq!(alpha, array![[1.0, 3.0], [0.0, 0.0], [4.0, 6.0]]);
        let bad = Array2::<f64>::zeros((2, 5));
        assert!(matches!(project(&bad, &loadings), Err(SaliencyError::DimMismatch(_))));
    }

    #[test]
    fn reconstruction_error_bounded_by_truncation() {
        // column-centered input so the linear reconstruction is meaningful
        let x = center_columns(&random_matrix(40, 10, 5));
        let l = 4;
        let loadings = sparse_pca(&x, l, 1e-9, 0.0, 200).unwrap();
        let alpha = project(&x, &loadings).unwrap();
        let recon = alpha.dot(&loadings.v_hat.t());
        let err = (&x - &recon).iter().map(|v| v * v).sum::<f64>().sqrt();

        let g = x.t().dot(&x);
        let (vals, _) = gram_eigen(&g);
        let truncation = vals[l..].iter().map(|v| v.max(0.0)).sum::<f64>().sqrt();
        assert!(
            err <= truncation * (1.0 + 1e-6) + 1e-9,
            "reconstruction {err} vs truncation bound {truncation}"
        );
    }

    #[test]
    fn histogram_examples() {
        // four equal coefficients: point mass, entropy zero
        let alpha = Array2::<f64>::from_elem((4, 1), 2.5);
        let p = coefficient_histograms(&alpha, 1, 4, 16).unwrap();
        assert_eq!(p[(0, 0, 0)], 1.0);
        assert_eq!(entropy_bits(p.index_axis(ndarray::Axis(0), 0).row(0)), 0.0);

        // uniform spread over 16 bins: entropy 4 bits
        let vals: Vec<f64> = (0..16).map(|i| i as f64 + 0.5).collect();
        let alpha = Array2::from_shape_vec((16, 1), vals).unwrap();
        let p = coefficient_histograms(&alpha, 1, 16, 16).unwrap();
        let e = entropy_bits(p.index_axis(ndarray::Axis(0), 0).row(0));
        assert!((e - 4.0).abs() < 1e-12);

        // distributions always sum to 1
        let alpha = random_matrix(12, 3, 2);
        let p = coefficient_histograms(&alpha, 3, 4, 8).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = p.index_axis(ndarray::Axis(0), i).row(j).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rightmost_edge_is_inclusive() {
        // the maximum value must land in the last bin, not overflow
        let alpha = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = coefficient_histograms(&alpha, 1, 4, 3).unwrap();
        let row = p.index_axis(ndarray::Axis(0), 0);
        assert!((row[(0, 2)] - 0.5).abs() < 1e-12, "bins: {:?}", row);
    }

    #[test]
    fn weight_arithmetic_and_uniform_fallback() {
        let opts = SaliencyOptions { components: 1, bins: 4, ..SaliencyOptions::default() };
        // phi = (1, 1, 2) -> w = (0.25, 0.25, 0.5) via handmade histograms
        let half = {
            // entropy 1 bit: two equally likely bins
            let mut p = Array3::<f64>::zeros((1, 1, 4));
            p[(0, 0, 0)] = 0.5;
            p[(0, 0, 1)] = 0.5;
            p
        };
        let two_bits = {
            let mut p = Array3::<f64>::zeros((1, 1, 4));
            for b in 0..4 {
                p[(0, 0, b)] = 0.25;
            }
            p
        };
        let profile = entropy_and_weights(
            &[half.clone(), half.clone(), two_bits],
            1,
            &opts,
            1,
            4,
            0.0,
        )
        .unwrap();
        assert_eq!(profile.phi, vec![1.0, 1.0, 2.0]);
        assert_eq!(profile.w, vec![0.25, 0.25, 0.5]);
        let sum: f64 = profile.w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);

        // all entropies zero -> uniform
        let dead = {
            let mut p = Array3::<f64>::zeros((1, 1, 4));
            p[(0, 0, 0)] = 1.0;
            p
        };
        let profile =
            entropy_and_weights(&[dead.clone(), dead.clone()], 1, &opts, 1, 4, 0.0).unwrap();
        assert_eq!(profile.w, vec![0.5, 0.5]);
    }

    #[test]
    fn removing_a_writer_leaves_others_untouched() {
        // global bin edges are writer-independent only if the removed
        // writer does not hold the global extremes; construct it so
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut alpha = Array2::<f64>::zeros((12, 2));
        for r in 0..8 {
            for c in 0..2 {
                alpha[(r, c)] = rng.gen_range(-1.0..1.0);
            }
        }
        alpha[(0, 0)] = -1.5;
        alpha[(1, 0)] = 1.5;
        alpha[(0, 1)] = -1.5;
        alpha[(1, 1)] = 1.5;
        for r in 8..12 {
            for c in 0..2 {
                alpha[(r, c)] = rng.gen_range(-1.0..1.0);
            }
        }
        let with = coefficient_histograms(&alpha, 3, 4, 8).unwrap();
        let without =
            coefficient_histograms(&alpha.slice(ndarray::s![..8, ..]).to_owned(), 2, 4, 8)
                .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for b in 0..8 {
                    assert_eq!(with[(i, j, b)], without[(i, j, b)]);
                }
            }
        }
    }

    #[test]
    fn full_calibration_bounds_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let writers = 5;
        let per_writer = 8;
        let filters = 4;
        let dim = 12;
        let per_filter: Vec<Array2<f64>> = (0..filters)
            .map(|f| {
                Array2::from_shape_fn((writers * per_writer, dim), |(r, _)| {
                    let writer = r / per_writer;
                    // filter-dependent writer separation plus noise
                    (writer as f64) * 0.2 * (f as f64 + 1.0) + rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        let set = CalibrationSet::new(writers, per_writer, per_filter).unwrap();
        let opts = SaliencyOptions {
            components: 3,
            bins: 8,
            lambda1: Some(0.0),
            ..SaliencyOptions::default()
        };
        let profile = calibrate_layer(&set, 1, &opts).unwrap();
        assert_eq!(profile.filters(), filters);
        let sum: f64 = profile.w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for &phi in &profile.phi {
            assert!((0.0..=3.0 + 1e-12).contains(&phi), "phi {phi} outside [0, log2 8]");
        }
        // scale invariance: weights depend on relative phi only
        let scaled: Vec<f64> = profile.phi.iter().map(|v| v * 7.0).collect();
        let renorm: Vec<f64> = {
            let s: f64 = scaled.iter().sum();
            scaled.iter().map(|v| v / s).collect()
        };
        for (a, b) in renorm.iter().zip(&profile.w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_filter_gets_zero_entropy_not_error() {
        let writers = 3;
        let per_writer = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let live = Array2::from_shape_fn((writers * per_writer, 10), |(r, _)| {
            (r / per_writer) as f64 + rng.gen_range(-1.0..1.0)
        });
        let dead = Array2::<f64>::zeros((writers * per_writer, 10));
        let set = CalibrationSet::new(writers, per_writer, vec![live, dead]).unwrap();
        let opts = SaliencyOptions {
            components: 2,
            bins: 8,
            lambda1: Some(0.0),
            ..SaliencyOptions::default()
        };
        let profile = calibrate_layer(&set, 2, &opts).unwrap();
        assert_eq!(profile.phi[1], 0.0);
        assert!(profile.w[0] > 0.99);
    }

    #[test]
    fn lambda1_bisection_hits_target_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let per_filter: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((40, 12), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let set = CalibrationSet::new(4, 10, per_filter).unwrap();
        let opts = SaliencyOptions { components: 4, bins: 8, ..SaliencyOptions::default() };
        let sample: Vec<&Array2<f64>> = set.per_filter.iter().collect();
        let lambda1 = choose_lambda1(&set, &opts);
        assert!(lambda1 > 0.0);
        let s = mean_sparsity_at(&sample, opts.components, opts.lambda, lambda1, opts.iters);
        assert!((s - 0.5).abs() <= 0.2, "sparsity {s} at lambda1 {lambda1} too far from 0.5");
    }

    #[test]
    fn profile_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.json");
        let profile = SaliencyProfile {
            format: PROFILE_FORMAT.into(),
            layer: 2,
            phi: vec![0.5, 1.5],
            w: vec![0.25, 0.75],
            bins: 16,
            components: 8,
            writers: 50,
            per_writer: 10,
            lambda: 1e-4,
            lambda1: 0.3,
            config_json: String::new(),
        };
        profile.save(&path).unwrap();
        let back = SaliencyProfile::load(&path).unwrap();
        assert_eq!(back, profile);
        assert_eq!(back.digest(), profile.digest());
    }
}
