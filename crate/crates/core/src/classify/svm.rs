//! Binary soft-margin SVM with an RBF kernel, solved in the dual by
//! sequential minimal optimization over a precomputed kernel matrix.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::ClassifyError;

/// Squared Euclidean distances between every row of `a` and every row of `b`,
/// via one matrix product (`‖a‖² + ‖b‖² − 2·a·bᵀ`). Cancellation can leave
/// tiny negatives; those are clamped so the kernel never exceeds one.
pub fn pairwise_sq_dists(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let an: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let bn: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (an[i] + bn[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Kernel matrix of a row set against itself. The diagonal is exactly one:
/// self-distances are identically zero, so the cancellation residue from the
/// distance formula is cleared before exponentiation.
pub fn self_kernel(rows: ArrayView2<'_, f64>, gamma: f64) -> Array2<f64> {
    let mut d2 = pairwise_sq_dists(rows, rows);
    for i in 0..d2.nrows() {
        d2[(i, i)] = 0.0;
    }
    d2.mapv_inplace(|v| (-gamma * v).exp());
    d2
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Stopping tolerance on the maximal KKT violation.
pub const SMO_TOL: f64 = 1e-3;

pub struct SmoOutcome {
    /// box-constrained duals, `0 ≤ alpha_i ≤ C`
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// final `m − M` gap; ≤ tol unless the iteration cap was hit
    pub kkt_residual: f64,
}

/// Maximal-violating-pair SMO for `min ½αᵀQα − Σα` with `Q_ij = y_i y_j K_ij`,
/// subject to `0 ≤ α ≤ C` and `Σ y_i α_i = 0`. Requires both labels present.
///
/// With `m = max{−y_t G_t : t movable up}` and `M = min{−y_t G_t : t movable
/// down}`, optimality is `m ≤ M`; iteration stops at `m − M ≤ tol` and the
/// bias is the midpoint of the final sandwich.
pub fn smo(kernel: &Array2<f64>, y: &[f64], c: f64, tol: f64) -> SmoOutcome {
    let n = y.len();
    debug_assert_eq!(kernel.dim(), (n, n));
    debug_assert!(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0));
    let mut alpha = vec![0.0f64; n];
    // gradient of the dual objective at alpha = 0
    let mut g = vec![-1.0f64; n];
    let cap = (100 * n).max(10_000);
    let mut iterations = 0usize;
    let mut residual = 0.0;
    let mut bias = 0.0;
    loop {
        let mut up: Option<(usize, f64)> = None;
        let mut low: Option<(usize, f64)> = None;
        for t in 0..n {
            let v = -y[t] * g[t];
            if (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0) {
                if up.is_none_or(|(_, best)| v > best) {
                    up = Some((t, v));
                }
            }
            if (y[t] < 0.0 && alpha[t] < c) || (y[t] > 0.0 && alpha[t] > 0.0) {
                if low.is_none_or(|(_, best)| v < best) {
                    low = Some((t, v));
                }
            }
        }
        let ((i, m), (j, mm)) = match (up, low) {
            (Some(a), Some(b)) => (a, b),
            // cannot happen while both classes are present and Σyα = 0
            _ => break,
        };
        residual = (m - mm).max(0.0);
        bias = 0.5 * (m + mm);
        if m - mm <= tol {
            break;
        }
        if iterations >= cap {
            log::warn!("SMO stopped at the iteration cap {cap} with KKT gap {residual:.3e}");
            break;
        }
        iterations += 1;

        // Newton step along the constraint line through (i, j), clipped to
        // the box; the feasible interval for alpha_i is never empty
        let (yi, yj) = (y[i], y[j]);
        let quad = (kernel[(i, i)] + kernel[(j, j)] - 2.0 * kernel[(i, j)]).max(1e-12);
        let delta = (m - mm) / quad;
        let sum = yi * alpha[i] + yj * alpha[j];
        let (lo, hi) = if yi * yj > 0.0 {
            ((alpha[i] + alpha[j] - c).max(0.0), (alpha[i] + alpha[j]).min(c))
        } else {
            ((alpha[i] - alpha[j]).max(0.0), (c + alpha[i] - alpha[j]).min(c))
        };
        let ai = (alpha[i] + yi * delta).clamp(lo, hi);
        let aj = yj * (sum - yi * ai);
        let (dai, daj) = (ai - alpha[i], aj - alpha[j]);
        alpha[i] = ai;
        alpha[j] = aj;
        let ki = kernel.row(i);
        let kj = kernel.row(j);
        for t in 0..n {
            g[t] += y[t] * (yi * dai * ki[t] + yj * daj * kj[t]);
        }
    }
    SmoOutcome { alpha, bias, iterations, kkt_residual: residual }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SvmMeta {
    pub positives: usize,
    pub negatives: usize,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// One writer's one-vs-all model. `coefs[i]` is `alpha_i · y_i` for support
/// vector `i`, so a decision value is `Σ coefs_i · K(sv_i, x) + bias`.
///
/// Support vectors are pinned to f32 precision at construction because the
/// bundle file stores them as f32; a reloaded model scores bit-identically.
#[derive(Debug, Clone)]
pub struct SvmModel {
    pub writer: u32,
    pub support_vectors: Array2<f64>,
    pub coefs: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub gamma: f64,
    pub meta: SvmMeta,
}

impl SvmModel {
    /// Decision values for each row of `x`.
    pub fn decisions(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, ClassifyError> {
        if x.ncols() != self.support_vectors.ncols() {
            return Err(ClassifyError::DimMismatch(format!(
                "descriptor length {} does not match the model's {}",
                x.ncols(),
                self.support_vectors.ncols()
            )));
        }
        let mut k = pairwise_sq_dists(x, self.support_vectors.view());
        k.mapv_inplace(|v| (-self.gamma * v).exp());
        Ok(k.dot(&ArrayView1::from(&self.coefs)) + self.bias)
    }

    /// Sigmoid-normalized decision values, each in [0, 1].
    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, ClassifyError> {
        Ok(self.decisions(x)?.mapv(sigmoid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_clusters(n_per: usize, gap: f64, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Array2::zeros((2 * n_per, 2));
        let mut y = Vec::with_capacity(2 * n_per);
        for i in 0..2 * n_per {
            let center = if i < n_per { 0.0 } else { gap };
            rows[(i, 0)] = center + rng.gen_range(-0.5..0.5);
            rows[(i, 1)] = center + rng.gen_range(-0.5..0.5);
            y.push(if i < n_per { 1.0 } else { -1.0 });
        }
        (rows, y)
    }

    #[test]
    fn self_kernel_has_unit_diagonal_and_symmetry() {
        let rows = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.0, 0.0, 0.0]];
        let k = self_kernel(rows.view(), 0.7);
        for i in 0..3 {
            assert_eq!(k[(i, i)], 1.0);
            for j in 0..3 {
                assert!((k[(i, j)] - k[(j, i)]).abs() < 1e-15);
                assert!(k[(i, j)] > 0.0 && k[(i, j)] <= 1.0);
            }
        }
        // hand value: ‖r0 − r2‖² = 0.14
        assert!((k[(0, 2)] - (-0.7f64 * 0.14).exp()).abs() < 1e-12);
    }

    #[test]
    fn smo_separates_two_clusters() {
        let (rows, y) = two_clusters(15, 4.0, 3);
        let k = self_kernel(rows.view(), 0.5);
        let out = smo(&k, &y, 10.0, SMO_TOL);
        assert!(out.kkt_residual <= SMO_TOL);
        let balance: f64 = out.alpha.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!(balance.abs() < 1e-9);
        for &a in &out.alpha {
            assert!((0.0..=10.0).contains(&a));
        }
        // every training point ends on its own side
        for t in 0..y.len() {
            let f: f64 = (0..y.len()).map(|s| out.alpha[s] * y[s] * k[(t, s)]).sum::<f64>()
                + out.bias;
            assert!(f * y[t] > 0.0, "point {t}: f = {f}, y = {}", y[t]);
        }
    }

    #[test]
    fn conflicting_duplicate_points_saturate_at_c() {
        // identical inputs with opposite labels: the dual pushes both to C
        let rows = array![[1.0, 2.0], [1.0, 2.0], [5.0, 5.0]];
        let y = vec![1.0, -1.0, 1.0];
        let k = self_kernel(rows.view(), 1.0);
        let c = 2.5;
        let out = smo(&k, &y, c, SMO_TOL);
        assert!(out.kkt_residual <= SMO_TOL);
        assert!((out.alpha[0] - c).abs() < 1e-9 || (out.alpha[1] - c).abs() < 1e-9);
        for &a in &out.alpha {
            assert!((0.0..=c).contains(&a));
        }
    }

    #[test]
    fn batch_decisions_match_the_kernel_sum() {
        let (rows, y) = two_clusters(8, 3.0, 11);
        let gamma = 0.25;
        let k = self_kernel(rows.view(), gamma);
        let out = smo(&k, &y, 5.0, SMO_TOL);
        let kept: Vec<usize> = (0..y.len()).filter(|&i| out.alpha[i] > 0.0).collect();
        let model = SvmModel {
            writer: 1,
            support_vectors: rows.select(ndarray::Axis(0), &kept),
            coefs: kept.iter().map(|&i| out.alpha[i] * y[i]).collect(),
            bias: out.bias,
            c: 5.0,
            gamma,
            meta: SvmMeta {
                positives: 8,
                negatives: 8,
                iterations: out.iterations,
                kkt_residual: out.kkt_residual,
            },
        };
        let probe = array![[0.3, -0.1], [3.2, 2.9]];
        let batch = model.decisions(probe.view()).unwrap();
        for (r, &expect) in probe.rows().into_iter().zip(batch.iter()) {
            let mut acc = model.bias;
            for (sv, &co) in model.support_vectors.rows().into_iter().zip(&model.coefs) {
                let d2: f64 = sv.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                acc += co * (-gamma * d2).exp();
            }
            assert!((acc - expect).abs() < 1e-9);
        }
        assert!(model.decisions(array![[1.0, 2.0, 3.0]].view()).is_err());
    }
}
