//! Layer primitives for the feature-extraction network, generic over f32
//! and f64 so the same code path serves fast training and the
//! finite-difference gradient oracle.
//!
//! Tensors are NCHW. Convolutions use TensorFlow-style same padding: the
//! output grid is ceil(input/stride) and the total padding splits with the
//! smaller half on the leading edge.

use ndarray::{Array1, Array2, Array4, ArrayView1, Axis};
use num_traits::Float;

/// Scalar abstraction for the network: f32 in production, f64 for the
/// gradient oracle.
pub trait Real:
    Float
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Same-padding output size.
#[inline]
pub fn out_dim(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Leading-edge padding for a 3x3 kernel under same padding.
#[inline]
fn pad_before(input: usize, stride: usize) -> usize {
    let out = out_dim(input, stride);
    let total = ((out - 1) * stride + 3).saturating_sub(input);
    total / 2
}

/// Unfolded convolution input: rows are kernel taps (cin * 3 * 3), columns
/// are output positions (n * ho * wo). Kept alive through the backward pass.
pub struct Cols<F> {
    pub mat: Array2<F>,
    pub in_shape: (usize, usize, usize, usize),
    pub out_hw: (usize, usize),
    pub stride: usize,
}

pub fn im2col<F: Real>(x: &Array4<F>, stride: usize) -> Cols<F> {
    let (n, cin, h, w) = x.dim();
    let ho = out_dim(h, stride);
    let wo = out_dim(w, stride);
    let pt = pad_before(h, stride) as isize;
    let pl = pad_before(w, stride) as isize;
    let cols_n = n * ho * wo;
    let mut mat = Array2::<F>::zeros((cin * 9, cols_n));
    for ci in 0..cin {
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = ci * 9 + (ky * 3 + kx) as usize;
                let mut row_view = mat.row_mut(row);
                let dst = row_view.as_slice_mut().expect("row-major row");
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = oy as isize * stride as isize + ky - pt;
                        let base = ni * ho * wo + oy * wo;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * stride as isize + kx - pl;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[base + ox] = x[(ni, ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    Cols { mat, in_shape: (n, cin, h, w), out_hw: (ho, wo), stride }
}

/// y[n, co, oy, ox] = sum_k w[co, k] * cols[k, (n, oy, ox)] + b[co]
pub fn conv_forward<F: Real>(cols: &Cols<F>, w: &Array4<F>, b: &Array1<F>) -> Array4<F> {
    let (n, _, _, _) = cols.in_shape;
    let (ho, wo) = cols.out_hw;
    let cout = w.dim().0;
    let w_mat = w
        .view()
        .into_shape_with_order((cout, w.len() / cout))
        .expect("contiguous kernel");
    let mut y_mat = w_mat.dot(&cols.mat);
    for (co, mut row) in y_mat.axis_iter_mut(Axis(0)).enumerate() {
        let bias = b[co];
        row.mapv_inplace(|v| v + bias);
    }
    // [cout, n*ho*wo] -> [n, cout, ho, wo]
    let y = y_mat
        .into_shape_with_order((cout, n, ho, wo))
        .expect("reshape");
    let mut out = Array4::<F>::zeros((n, cout, ho, wo));
    out.assign(&y.permuted_axes([1, 0, 2, 3]));
    out
}

/// Returns (dx, dw, db).
pub fn conv_backward<F: Real>(
    dy: &Array4<F>,
    cols: &Cols<F>,
    w: &Array4<F>,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, cin, h, wdim) = cols.in_shape;
    let (ho, wo) = cols.out_hw;
    let stride = cols.stride;
    let cout = w.dim().0;

    // [n, cout, ho, wo] -> [cout, n*ho*wo]
    let mut dy_mat = Array2::<F>::zeros((cout, n * ho * wo));
    {
        let dy_perm = dy.view().permuted_axes([1, 0, 2, 3]);
        let dy_resh = dy_perm
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, n * ho * wo))
            .expect("reshape");
        dy_mat.assign(&dy_resh);
    }

    let db = dy_mat.sum_axis(Axis(1));
    let dw_mat = dy_mat.dot(&cols.mat.t());
    let dw = dw_mat
        .into_shape_with_order((cout, cin, 3, 3))
        .expect("reshape");

    let w_mat = w
        .view()
        .into_shape_with_order((cout, cin * 9))
        .expect("contiguous kernel");
    let dcols = w_mat.t().dot(&dy_mat);

    let pt = pad_before(h, stride) as isize;
    let pl = pad_before(wdim, stride) as isize;
    let mut dx = Array4::<F>::zeros((n, cin, h, wdim));
    for ci in 0..cin {
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = ci * 9 + (ky * 3 + kx) as usize;
                let src = dcols.row(row);
                let src = src.as_slice().expect("row-major row");
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = oy as isize * stride as isize + ky - pt;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ni * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = ox as isize * stride as isize + kx - pl;
                            if ix < 0 || ix >= wdim as isize {
                                continue;
                            }
                            dx[(ni, ci, iy as usize, ix as usize)] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn relu_forward<F: Real>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `pre` is the ReLU input; gradient passes where it was positive.
pub fn relu_backward<F: Real>(dy: &Array4<F>, pre: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Per-channel batch-normalization cache for the backward pass.
pub struct BnCache<F> {
    pub xhat: Array4<F>,
    pub inv_std: Array1<F>,
    pub batch_mean: Array1<F>,
    /// biased (1/count) batch variance
    pub batch_var: Array1<F>,
}

/// Training-mode batch norm: normalizes with the batch statistics and
/// reports them so the caller can fold them into the running estimates.
pub fn bn_forward_train<F: Real>(
    x: &Array4<F>,
    gamma: &ArrayView1<F>,
    beta: &ArrayView1<F>,
    eps: F,
) -> (Array4<F>, BnCache<F>) {
    let (n, c, h, w) = x.dim();
    let count = F::from_f64((n * h * w) as f64);
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let slice = x.index_axis(Axis(1), ci);
        let mut acc = F::zero();
        for &v in slice.iter() {
            acc += v;
        }
        let mu = acc / count;
        let mut acc2 = F::zero();
        for &v in slice.iter() {
            let d = v - mu;
            acc2 += d * d;
        }
        mean[ci] = mu;
        var[ci] = acc2 / count;
    }
    let mut inv_std = Array1::<F>::zeros(c);
    for ci in 0..c {
        inv_std[ci] = F::one() / (var[ci] + eps).sqrt();
    }
    let mut xhat = x.clone();
    let mut y = Array4::<F>::zeros((n, c, h, w));
    for ci in 0..c {
        let mu = mean[ci];
        let is = inv_std[ci];
        let g = gamma[ci];
        let b = beta[ci];
        let mut xh = xhat.index_axis_mut(Axis(1), ci);
        let mut yv = y.index_axis_mut(Axis(1), ci);
        xh.mapv_inplace(|v| (v - mu) * is);
        yv.assign(&xh);
        yv.mapv_inplace(|v| g * v + b);
    }
    (y, BnCache { xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Inference-mode batch norm using running statistics.
pub fn bn_forward_infer<F: Real>(
    x: &Array4<F>,
    gamma: &ArrayView1<F>,
    beta: &ArrayView1<F>,
    running_mean: &ArrayView1<F>,
    running_var: &ArrayView1<F>,
    eps: F,
) -> Array4<F> {
    let (_, c, _, _) = x.dim();
    let mut y = x.clone();
    for ci in 0..c {
        let scale = gamma[ci] / (running_var[ci] + eps).sqrt();
        let shift = beta[ci] - running_mean[ci] * scale;
        y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * scale + shift);
    }
    y
}

/// Returns (dx, dgamma, dbeta).
pub fn bn_backward<F: Real>(
    dy: &Array4<F>,
    cache: &BnCache<F>,
    gamma: &ArrayView1<F>,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (n, c, h, w) = dy.dim();
    let count = F::from_f64((n * h * w) as f64);
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for ci in 0..c {
        let dy_c = dy.index_axis(Axis(1), ci);
        let xh_c = cache.xhat.index_axis(Axis(1), ci);
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for (&d, &xh) in dy_c.iter().zip(xh_c.iter()) {
            sum_dy += d;
            sum_dy_xhat += d * xh;
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let g_is = gamma[ci] * cache.inv_std[ci];
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        let mut dx_c = dx.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut dx_c).and(&dy_c).and(&xh_c).for_each(|o, &d, &xh| {
            *o = g_is * (d - mean_dy - xh * mean_dy_xhat);
        });
    }
    (dx, dgamma, dbeta)
}

/// Global average pool over the spatial grid: [n, c, h, w] -> [n, c].
pub fn gap_forward<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let count = F::from_f64((h * w) as f64);
    let mut y = Array2::<F>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = F::zero();
            for &v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                acc += v;
            }
            y[(ni, ci)] = acc / count;
        }
    }
    y
}

pub fn gap_backward<F: Real>(dy: &Array2<F>, in_shape: (usize, usize, usize, usize)) -> Array4<F> {
    let (n, c, h, w) = in_shape;
    let count = F::from_f64((h * w) as f64);
    let mut dx = Array4::<F>::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..c {
            let g = dy[(ni, ci)] / count;
            dx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// y = x * w^T + b with w laid out [classes, features].
pub fn linear_forward<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    for mut row in y.axis_iter_mut(Axis(0)) {
        row.zip_mut_with(&b.view(), |v, &bb| *v += bb);
    }
    y
}

/// Returns (dx, dw, db).
pub fn linear_backward<F: Real>(
    dy: &Array2<F>,
    x: &Array2<F>,
    w: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Mean softmax cross-entropy over the batch; also returns dlogits.
pub fn softmax_ce<F: Real>(logits: &Array2<F>, targets: &[usize]) -> (F, Array2<F>) {
    let (n, k) = logits.dim();
    assert_eq!(targets.len(), n);
    let nf = F::from_f64(n as f64);
    let mut dlogits = Array2::<F>::zeros((n, k));
    let mut loss = F::zero();
    for ni in 0..n {
        let row = logits.row(ni);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for &v in row.iter() {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[targets[ni]] - max);
        for ki in 0..k {
            let p = (row[ki] - max).exp() / denom;
            let ind = if ki == targets[ni] { F::one() } else { F::zero() };
            dlogits[(ni, ki)] = (p - ind) / nf;
        }
    }
    (loss / nf, dlogits)
}

/// Forward-only softmax probabilities (row-wise).
pub fn softmax<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().cloned().sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn same_padding_shapes() {
        assert_eq!(out_dim(28, 1), 28);
        assert_eq!(out_dim(28, 2), 14);
        assert_eq!(out_dim(17, 2), 9);
        assert_eq!(out_dim(9, 2), 5);
        assert_eq!(out_dim(5, 2), 3);
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        // kernel with 1 at center acts as identity under same padding
        let x = Array4::from_shape_fn((1, 1, 5, 5), |(_, _, y, xx)| (y * 5 + xx) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let b = Array1::zeros(1);
        let cols = im2col(&x, 1);
        let y = conv_forward(&cols, &w, &b);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride2_picks_padded_grid() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, xx)| (y * 4 + xx) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let b = Array1::zeros(1);
        let cols = im2col(&x, 2);
        let y = conv_forward(&cols, &w, &b);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        // even input needs 1 total pad, all of it trailing, so windows start
        // at row 0 and the center tap lands on the odd grid
        assert_eq!(y[(0, 0, 0, 0)], 5.0);
        assert_eq!(y[(0, 0, 1, 1)], 15.0);
    }

    #[test]
    fn bn_train_normalizes_batch() {
        let x = Array4::from_shape_fn((2, 1, 2, 2), |(n, _, y, xx)| (n * 4 + y * 2 + xx) as f64);
        let gamma = array![2.0];
        let beta = array![1.0];
        let (y, cache) = bn_forward_train(&x, &gamma.view(), &beta.view(), 1e-12);
        let mean: f64 = y.iter().sum::<f64>() / 8.0;
        assert!((mean - 1.0).abs() < 1e-9);
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!((var - 4.0).abs() < 1e-6);
        assert!((cache.batch_mean[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Array2::<f64>::zeros((2, 4));
        let (loss, dl) = softmax_ce(&logits, &[0, 3]);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((dl[(0, 0)] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }
}
